//! Reasoning trajectory generation: difficulty filtering, verifier-guided
//! iterative search over reasoning paths, and structured rewriting of the
//! accepted path into a canonical trajectory.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{
    answer_from_literal, parse_trajectory, render, validate_text, whitespace_tokens, FormatConfig,
    FormatError, RawTrajectory, Section,
};
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest};
use crate::prompts;
use crate::reward::{parse_true_false, quality_of, PointMatcher, SubstringMatcher};
use crate::task::{TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RtgError {
    #[error("solver unavailable: {0}")]
    SolverUnavailable(String),
    #[error("client protocol error: {0}")]
    ClientProtocolError(String),
    #[error("session for {0} did not end in acceptance")]
    SessionNotAccepted(String),
    #[error("rewrite failed: {0}")]
    Rewrite(String),
    #[error("invalid search config: {0}")]
    Config(String),
}

impl From<FormatError> for RtgError {
    fn from(e: FormatError) -> Self {
        RtgError::Rewrite(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefinementStrategy {
    Backtracking,
    NewPath,
    Verification,
    Correction,
}

impl RefinementStrategy {
    pub const ALL: [RefinementStrategy; 4] = [
        RefinementStrategy::Backtracking,
        RefinementStrategy::NewPath,
        RefinementStrategy::Verification,
        RefinementStrategy::Correction,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RefinementStrategy::Backtracking => "backtracking",
            RefinementStrategy::NewPath => "new_path",
            RefinementStrategy::Verification => "verification",
            RefinementStrategy::Correction => "correction",
        }
    }

    pub fn instruction(self) -> &'static str {
        match self {
            RefinementStrategy::Backtracking => {
                "Revisit the earlier reasoning steps and find where the analysis went wrong."
            }
            RefinementStrategy::NewPath => "Discard the previous approach and analyse the problem from a different angle.",
            RefinementStrategy::Verification => "Check each step of the current reasoning against the facts of the case.",
            RefinementStrategy::Correction => "Fix the specific errors in the current reasoning and restate the corrected chain.",
        }
    }

    fn subtitle(self) -> &'static str {
        match self {
            RefinementStrategy::Backtracking => "Reasoning Review",
            RefinementStrategy::NewPath => "Alternative Analysis",
            RefinementStrategy::Verification => "Evidence Check",
            RefinementStrategy::Correction => "Refined Analysis",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub max_iterations: u32,
    pub max_attempts: u32,
    pub strategy_seed: u64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self { max_iterations: 3, max_attempts: 3, strategy_seed: 0 }
    }
}

impl SearchConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.max_iterations == 0 || self.max_attempts == 0 {
            return Err("search: max_iterations and max_attempts must be >= 1".into());
        }
        Ok(())
    }
}

/// One reasoning step `e_i` with its candidate answer `y_i`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathStep {
    pub reasoning: String,
    pub answer: String,
    pub strategy: Option<RefinementStrategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSession {
    pub problem: TaskSpec,
    /// 1-based attempt index.
    pub attempt: u32,
    /// Refinements completed in the current attempt.
    pub iteration: u32,
    /// Steps of the current attempt; `path.len() == iteration + 1`.
    pub path: Vec<PathStep>,
    /// Verdicts of the current attempt, one per step.
    pub verdicts: Vec<bool>,
    /// Every refinement strategy drawn, across all attempts.
    pub strategies: Vec<RefinementStrategy>,
    pub generator_calls: usize,
    pub verifier_calls: usize,
    pub accepted: bool,
}

impl SearchSession {
    fn new(problem: &TaskSpec) -> Self {
        Self {
            problem: problem.clone(),
            attempt: 0,
            iteration: 0,
            path: Vec::new(),
            verdicts: Vec::new(),
            strategies: Vec::new(),
            generator_calls: 0,
            verifier_calls: 0,
            accepted: false,
        }
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.path.last().map(|s| s.answer.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SearchOutcome {
    Accepted(RawTrajectory, SearchSession),
    Discarded(SearchSession),
}

impl SearchOutcome {
    pub fn session(&self) -> &SearchSession {
        match self {
            SearchOutcome::Accepted(_, s) | SearchOutcome::Discarded(s) => s,
        }
    }

    pub fn trajectory(&self) -> Option<&RawTrajectory> {
        match self {
            SearchOutcome::Accepted(t, _) => Some(t),
            SearchOutcome::Discarded(_) => None,
        }
    }
}

/// What the generator sees on each round.
#[derive(Debug, Clone, Copy)]
pub struct GenerationContext<'a> {
    pub problem: &'a TaskSpec,
    pub attempt: u32,
    pub iteration: u32,
    pub path: &'a [PathStep],
    pub strategy: Option<RefinementStrategy>,
}

pub trait StepGenerator: Send + Sync {
    fn generate(&self, ctx: &GenerationContext<'_>) -> Result<PathStep, RtgError>;

    /// Free-form rewrite of an accepted path. `None` selects the templated
    /// linearization.
    fn rewrite(&self, _session: &SearchSession) -> Option<Result<String, RtgError>> {
        None
    }
}

pub trait AnswerVerifier: Send + Sync {
    fn verify(&self, problem: &TaskSpec, candidate: &str) -> Result<bool, RtgError>;
}

pub trait ZeroShotSolver: Send + Sync {
    fn solve(&self, problem: &TaskSpec) -> Result<String, RtgError>;
}

/// Answer-level check against the gold answer using the task's scorer:
/// accepted iff quality reaches 1.
pub struct GoldVerifier<M: PointMatcher = SubstringMatcher> {
    pub matcher: M,
}

impl Default for GoldVerifier {
    fn default() -> Self {
        Self { matcher: SubstringMatcher }
    }
}

impl<M: PointMatcher> AnswerVerifier for GoldVerifier<M> {
    fn verify(&self, problem: &TaskSpec, candidate: &str) -> Result<bool, RtgError> {
        Ok(answer_quality(problem, candidate, &self.matcher)? >= 1.0)
    }
}

fn answer_quality(problem: &TaskSpec, literal: &str, matcher: &dyn PointMatcher) -> Result<f64, RtgError> {
    let Ok(answer) = answer_from_literal(literal, problem.kind) else {
        return Ok(0.0);
    };
    quality_of(&answer, problem, matcher).map_err(|e| RtgError::ClientProtocolError(e.to_string()))
}

/// Replays a verdict script, repeating the last entry.
pub struct ScriptedVerifier {
    verdicts: Vec<bool>,
    calls: AtomicUsize,
}

impl ScriptedVerifier {
    pub fn new(verdicts: Vec<bool>) -> Self {
        Self { verdicts, calls: AtomicUsize::new(0) }
    }

    pub fn always(verdict: bool) -> Self {
        Self::new(vec![verdict])
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl AnswerVerifier for ScriptedVerifier {
    fn verify(&self, _problem: &TaskSpec, _candidate: &str) -> Result<bool, RtgError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        self.verdicts
            .get(i)
            .or(self.verdicts.last())
            .copied()
            .ok_or_else(|| RtgError::ClientProtocolError("empty verdict script".into()))
    }
}

/// Replays fixed steps, repeating the last one.
pub struct ScriptedGenerator {
    steps: Vec<(String, String)>,
    calls: AtomicUsize,
}

impl ScriptedGenerator {
    pub fn new<I, R, A>(steps: I) -> Self
    where
        I: IntoIterator<Item = (R, A)>,
        R: Into<String>,
        A: Into<String>,
    {
        Self {
            steps: steps.into_iter().map(|(r, a)| (r.into(), a.into())).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl StepGenerator for ScriptedGenerator {
    fn generate(&self, ctx: &GenerationContext<'_>) -> Result<PathStep, RtgError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        let (reasoning, answer) = self
            .steps
            .get(i)
            .or(self.steps.last())
            .cloned()
            .ok_or_else(|| RtgError::ClientProtocolError("empty generator script".into()))?;
        Ok(PathStep { reasoning, answer, strategy: ctx.strategy })
    }
}

/// Offline generator for any dataset. Proposes options in a seeded order,
/// so a gold verifier eventually accepts on most choice problems. Refinement
/// steps deliberately carry backtracking phrasing.
pub struct MockGenerator {
    pub seed: u64,
}

impl StepGenerator for MockGenerator {
    fn generate(&self, ctx: &GenerationContext<'_>) -> Result<PathStep, RtgError> {
        let p = ctx.problem;
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ fnv1a(&p.id) ^ ((ctx.attempt as u64) << 32) ^ ctx.iteration as u64,
        );
        let answer = match (p.kind, p.options.as_deref()) {
            (TaskKind::ShortAnswer, _) => {
                let points = p.gold.scoring_points();
                let keep = rng.gen_range(0..=points.len());
                points[..keep].join("; ")
            }
            (TaskKind::MultiChoice, Some(opts)) if !opts.is_empty() => {
                let picked: Vec<&str> =
                    opts.iter().filter(|_| rng.gen_bool(0.5)).map(String::as_str).collect();
                if picked.is_empty() { opts[0].clone() } else { picked.join(", ") }
            }
            (_, Some(opts)) if !opts.is_empty() => opts[rng.gen_range(0..opts.len())].clone(),
            _ => "unknown".to_string(),
        };
        let mut reasoning = String::new();
        if ctx.strategy.is_some() {
            reasoning.push_str("Wait, earlier I may have missed something. Let me revisit the case. ");
        }
        reasoning.push_str(&format!(
            "The case description points towards {answer}. The stated details are weighed against each option \
             and the remaining alternatives fit the evidence less well."
        ));
        Ok(PathStep { reasoning, answer, strategy: ctx.strategy })
    }
}

/// Solver replaying answers in call order.
pub struct ScriptedSolver {
    answers: Vec<String>,
    next: Mutex<usize>,
}

impl ScriptedSolver {
    pub fn new<S: Into<String>>(answers: impl IntoIterator<Item = S>) -> Self {
        Self { answers: answers.into_iter().map(Into::into).collect(), next: Mutex::new(0) }
    }
}

impl ZeroShotSolver for ScriptedSolver {
    fn solve(&self, _problem: &TaskSpec) -> Result<String, RtgError> {
        let mut i = self.next.lock().expect("solver lock");
        let a = self
            .answers
            .get(*i)
            .cloned()
            .ok_or_else(|| RtgError::SolverUnavailable(format!("no scripted answer #{}", *i)))?;
        *i += 1;
        Ok(a)
    }
}

/// Offline solver that always answers with the first option.
pub struct FirstOptionSolver;

impl ZeroShotSolver for FirstOptionSolver {
    fn solve(&self, problem: &TaskSpec) -> Result<String, RtgError> {
        Ok(problem.options.as_ref().and_then(|o| o.first()).cloned().unwrap_or_default())
    }
}

/// Splits a free-form model reply at its last `Answer:` line.
pub fn split_reply(text: &str, prefix: &str) -> Option<PathStep> {
    let lines: Vec<&str> = text.trim().lines().collect();
    let idx = lines.iter().rposition(|l| l.trim_start().starts_with(prefix))?;
    let answer = lines[idx].trim_start()[prefix.len()..].trim().to_string();
    if answer.is_empty() {
        return None;
    }
    Some(PathStep { reasoning: lines[..idx].join("\n").trim().to_string(), answer, strategy: None })
}

fn options_block(p: &TaskSpec) -> String {
    match &p.options {
        Some(o) if !o.is_empty() => format!("Options: {}", o.join(", ")),
        _ => String::new(),
    }
}

fn render_path(path: &[PathStep]) -> String {
    path.iter()
        .enumerate()
        .map(|(i, s)| format!("Step {}:\n{}\nAnswer: {}", i + 1, s.reasoning, s.answer))
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub struct LlmGenerator<B: ChatBackend> {
    pub backend: B,
    pub model: String,
    pub temperature: f64,
    pub answer_prefix: String,
    /// Ask the model for a free-form rewrite instead of the templated one.
    pub live_rewrite: bool,
}

impl<B: ChatBackend> LlmGenerator<B> {
    fn ask(&self, prompt: String) -> Result<String, RtgError> {
        let mut req = ChatRequest::new(&self.model, vec![ChatMessage::user(prompt)]);
        req.temperature = self.temperature;
        self.backend
            .complete(&req)
            .map(|r| r.text)
            .map_err(|e| RtgError::ClientProtocolError(e.to_string()))
    }
}

impl<B: ChatBackend> StepGenerator for LlmGenerator<B> {
    fn generate(&self, ctx: &GenerationContext<'_>) -> Result<PathStep, RtgError> {
        let p = ctx.problem;
        let options = options_block(p);
        let prompt = match ctx.strategy {
            None => prompts::generator_initial().render(&[("prompt", &p.prompt), ("options", &options)]),
            Some(s) => prompts::generator_refine().render(&[
                ("prompt", &p.prompt),
                ("options", &options),
                ("path", &render_path(ctx.path)),
                ("strategy", s.name()),
                ("strategy_instruction", s.instruction()),
            ]),
        };
        let text = self.ask(prompt)?;
        let mut step = split_reply(&text, &self.answer_prefix)
            .ok_or_else(|| RtgError::ClientProtocolError(format!("reply has no {:?} line", self.answer_prefix)))?;
        step.strategy = ctx.strategy;
        Ok(step)
    }

    fn rewrite(&self, session: &SearchSession) -> Option<Result<String, RtgError>> {
        if !self.live_rewrite {
            return None;
        }
        let answer = session.final_answer().unwrap_or_default();
        let prompt = prompts::rewrite().render(&[
            ("prompt", &session.problem.prompt),
            ("path", &render_path(&session.path)),
            ("answer", answer),
        ]);
        Some(self.ask(prompt))
    }
}

pub struct LlmVerifier<B: ChatBackend> {
    pub backend: B,
    pub model: String,
}

fn gold_text(p: &TaskSpec) -> String {
    match p.kind {
        TaskKind::ShortAnswer => p.gold.scoring_points().join("; "),
        _ => p.gold.label_set().into_iter().collect::<Vec<_>>().join(", "),
    }
}

impl<B: ChatBackend> AnswerVerifier for LlmVerifier<B> {
    fn verify(&self, problem: &TaskSpec, candidate: &str) -> Result<bool, RtgError> {
        let prompt = prompts::verifier().render(&[
            ("prompt", &problem.prompt),
            ("gold", &gold_text(problem)),
            ("candidate", candidate),
        ]);
        let reply = self
            .backend
            .complete(&ChatRequest::new(&self.model, vec![ChatMessage::user(prompt)]))
            .map_err(|e| RtgError::ClientProtocolError(e.to_string()))?;
        parse_true_false(&reply.text)
            .ok_or_else(|| RtgError::ClientProtocolError(format!("unexpected verdict {:?}", reply.text)))
    }
}

pub struct LlmSolver<B: ChatBackend> {
    pub backend: B,
    pub model: String,
    pub answer_prefix: String,
}

impl<B: ChatBackend> ZeroShotSolver for LlmSolver<B> {
    fn solve(&self, problem: &TaskSpec) -> Result<String, RtgError> {
        let prompt = prompts::solver().render(&[("prompt", &problem.prompt), ("options", &options_block(problem))]);
        let reply = self
            .backend
            .complete(&ChatRequest::new(&self.model, vec![ChatMessage::user(prompt)]))
            .map_err(|e| RtgError::SolverUnavailable(e.to_string()))?;
        Ok(split_reply(&reply.text, &self.answer_prefix)
            .map(|s| s.answer)
            .unwrap_or_else(|| reply.text.trim().to_string()))
    }
}

/// Keeps the problems the solver gets wrong, in input order.
pub fn difficulty_filter(
    dataset: &[TaskSpec],
    solver: &dyn ZeroShotSolver,
    matcher: &dyn PointMatcher,
) -> Result<Vec<TaskSpec>, RtgError> {
    let mut kept = Vec::new();
    for task in dataset {
        let answer = solver.solve(task)?;
        if answer_quality(task, &answer, matcher)? < 1.0 {
            kept.push(task.clone());
        }
    }
    Ok(kept)
}

fn fnv1a(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Runs the search for one problem. Each attempt is one initial generation
/// plus at most `max_iterations - 1` refinements.
pub fn search_trajectory(
    problem: &TaskSpec,
    generator: &dyn StepGenerator,
    verifier: &dyn AnswerVerifier,
    cfg: &SearchConfig,
    format: &FormatConfig,
) -> Result<SearchOutcome, RtgError> {
    cfg.check().map_err(RtgError::Config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.strategy_seed ^ fnv1a(&problem.id));
    let mut session = SearchSession::new(problem);

    for attempt in 1..=cfg.max_attempts {
        session.attempt = attempt;
        session.iteration = 0;
        session.path.clear();
        session.verdicts.clear();

        let mut strategy = None;
        loop {
            let step = generator.generate(&GenerationContext {
                problem,
                attempt,
                iteration: session.iteration,
                path: &session.path,
                strategy,
            })?;
            session.generator_calls += 1;
            let ok = verifier.verify(problem, &step.answer)?;
            session.verifier_calls += 1;
            session.path.push(step);
            session.verdicts.push(ok);

            if ok {
                session.accepted = true;
                let text = rewrite_session(&session, format, generator)?;
                return Ok(SearchOutcome::Accepted(text, session));
            }
            if session.iteration + 1 >= cfg.max_iterations {
                break;
            }
            let s = RefinementStrategy::ALL[rng.gen_range(0..RefinementStrategy::ALL.len())];
            session.strategies.push(s);
            session.iteration += 1;
            strategy = Some(s);
        }
    }
    Ok(SearchOutcome::Discarded(session))
}

const META_MARKERS: &[&str] = &[
    "wait",
    "hmm",
    "oops",
    "actually,",
    "let me revisit",
    "let me reconsider",
    "let me re-",
    "let me go back",
    "let me check again",
    "on second thought",
    "earlier i",
    "i forgot",
    "i made a mistake",
    "i was wrong",
    "going back",
    "revisit",
];

fn is_meta(sentence: &str) -> bool {
    let s = sentence.trim_start().to_lowercase();
    META_MARKERS.iter().any(|m| s.starts_with(m))
}

fn sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &c) in chars.iter().enumerate() {
        if c == '\n' {
            if !cur.trim().is_empty() {
                out.push(cur.trim().to_string());
            }
            cur.clear();
            continue;
        }
        cur.push(c);
        let at_break = matches!(c, '.' | '!' | '?') && chars.get(i + 1).is_none_or(|n| n.is_whitespace());
        if at_break {
            out.push(cur.trim().to_string());
            cur.clear();
        }
    }
    if !cur.trim().is_empty() {
        out.push(cur.trim().to_string());
    }
    out
}

/// Removes markup a section body may not contain.
fn sanitize(text: &str) -> String {
    let mut s = text.to_string();
    for tag in ["<think>", "</think>", "<answer>", "</answer>"] {
        s = s.replace(tag, " ");
    }
    s.lines()
        .map(|l| l.trim_start().trim_start_matches('#').trim())
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join("\n")
}

/// Drops backtracking remarks and joins the rest into one paragraph.
pub fn strip_meta(text: &str) -> String {
    sentences(&sanitize(text))
        .into_iter()
        .filter(|s| !is_meta(s))
        .collect::<Vec<_>>()
        .join(" ")
}

fn one_line(s: &str) -> String {
    sanitize(s).split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Templated linearization of an accepted session.
pub fn structure_rewrite(session: &SearchSession, cfg: &FormatConfig) -> Result<RawTrajectory, RtgError> {
    if !session.accepted || session.verdicts.last() != Some(&true) {
        return Err(RtgError::SessionNotAccepted(session.problem.id.clone()));
    }
    let answer = one_line(session.final_answer().unwrap_or_default());
    if answer.is_empty() {
        return Err(RtgError::Rewrite("accepted answer is empty after sanitizing".into()));
    }

    let mut sections: Vec<Section> = Vec::new();
    for step in &session.path {
        let body = strip_meta(&step.reasoning);
        if body.is_empty() {
            continue;
        }
        let subtitle = match step.strategy {
            None if sections.is_empty() => "Case Analysis",
            None => "Further Analysis",
            Some(s) => s.subtitle(),
        };
        sections.push(Section::new(subtitle, body));
    }
    if sections.is_empty() {
        sections.push(Section::new("Problem Review", one_line(&session.problem.prompt)));
    }
    if sections.iter().all(|s| s.body.is_empty()) {
        sections[0].body = "The problem statement is reviewed against the available evidence.".into();
    }

    let conclusion = format!(
        "Taking the analysis above together, the answer best supported by the case details is {answer}."
    );
    let budget = cfg.max_think_tokens.saturating_sub(whitespace_tokens(&conclusion) + 3 * sections.len() + 3);
    fit_budget(&mut sections, budget);

    let raw = render(&sections, &conclusion, &answer, cfg)?;
    let (_, report) = validate_text(&raw, cfg, None);
    if !report.is_valid() {
        return Err(RtgError::Rewrite(format!("templated rewrite is invalid: {:?}", report.violations)));
    }
    Ok(raw)
}

/// Trims section bodies, oldest first, until the body token total fits.
fn fit_budget(sections: &mut Vec<Section>, budget: usize) {
    let total = |ss: &[Section]| ss.iter().map(|s| whitespace_tokens(&s.body)).sum::<usize>();
    while total(sections) > budget && sections.len() > 1 {
        sections.remove(0);
    }
    if total(sections) > budget {
        let words: Vec<&str> = sections[0].body.split_whitespace().collect();
        sections[0].body = words[words.len() - budget.max(1)..].join(" ");
    }
}

/// Uses the generator's own rewrite when it offers one, re-validating and
/// retrying once; otherwise, or after two invalid rewrites, the templated
/// linearization.
fn rewrite_session(
    session: &SearchSession,
    cfg: &FormatConfig,
    generator: &dyn StepGenerator,
) -> Result<RawTrajectory, RtgError> {
    for _ in 0..2 {
        let Some(reply) = generator.rewrite(session) else { break };
        let raw = RawTrajectory(reply?.trim().to_string());
        if live_rewrite_ok(&raw, session, cfg) {
            return Ok(raw);
        }
    }
    structure_rewrite(session, cfg)
}

fn live_rewrite_ok(raw: &RawTrajectory, session: &SearchSession, cfg: &FormatConfig) -> bool {
    let (_, report) = validate_text(raw, cfg, None);
    if !report.is_valid() {
        return false;
    }
    let Ok(parsed) = parse_trajectory(raw, cfg) else { return false };
    let kind = session.problem.kind;
    let wanted = answer_from_literal(session.final_answer().unwrap_or_default(), kind);
    let got = answer_from_literal(&parsed.answer_literal, kind);
    matches!((wanted, got), (Ok(a), Ok(b)) if a == b)
}

/// One line of the trajectory JSONL output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub problem_id: String,
    pub text: String,
    /// Attempt that produced the accepted path.
    pub attempts: u32,
    /// Generation rounds across all attempts.
    pub iterations: usize,
    pub strategies: Vec<RefinementStrategy>,
}

impl TrajectoryRecord {
    pub fn from_outcome(outcome: &SearchOutcome) -> Option<Self> {
        let SearchOutcome::Accepted(text, s) = outcome else { return None };
        Some(Self {
            problem_id: s.problem.id.clone(),
            text: text.0.clone(),
            attempts: s.attempt,
            iterations: s.generator_calls,
            strategies: s.strategies.clone(),
        })
    }
}

/// Searches independent problems in parallel. Output order follows input.
pub fn search_all(
    problems: &[TaskSpec],
    generator: &dyn StepGenerator,
    verifier: &dyn AnswerVerifier,
    cfg: &SearchConfig,
    format: &FormatConfig,
) -> Vec<Result<SearchOutcome, RtgError>> {
    problems
        .par_iter()
        .map(|p| search_trajectory(p, generator, verifier, cfg, format))
        .collect()
}
