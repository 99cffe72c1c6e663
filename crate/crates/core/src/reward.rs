//! Composite gated reward: format gate × length gate × consistency gate × quality.
//!
//! Gates are evaluated in that order and evaluation stops at the first zero;
//! components that were never evaluated are recorded as `None`.

use std::collections::{BTreeSet, HashMap};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{
    count_think_tokens, extract_answer, normalize_label, parse_trajectory, validate, AnswerValue,
    FormatConfig, ParsedTrajectory, RawTrajectory,
};
use crate::gateway::{ChatBackend, ChatMessage, ChatRequest, GatewayError};
use crate::prompts;
use crate::task::{TaskKind, TaskSpec};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RewardError {
    #[error("consistency judge unavailable: {0}")]
    JudgeUnavailable(String),
    #[error("point matcher failed: {0}")]
    Matcher(String),
}

impl From<GatewayError> for RewardError {
    fn from(e: GatewayError) -> Self {
        RewardError::JudgeUnavailable(e.to_string())
    }
}

pub fn score_single_choice(answer: &str, gold: &str) -> f64 {
    if normalize_label(answer) == normalize_label(gold) {
        1.0
    } else {
        0.0
    }
}

/// Jaccard similarity `|Y ∩ Y*| / |Y ∪ Y*|`. Two empty sets score 0.
pub fn score_multi_choice(answer: &BTreeSet<String>, gold: &BTreeSet<String>) -> f64 {
    let union = answer.union(gold).count();
    if union == 0 {
        return 0.0;
    }
    answer.intersection(gold).count() as f64 / union as f64
}

pub trait PointMatcher: Send + Sync {
    fn matches(&self, response: &str, point: &str) -> Result<bool, RewardError>;
}

/// Lowercases, turns punctuation into spaces and collapses whitespace.
pub fn normalize_text(s: &str) -> String {
    let mapped: String = s
        .chars()
        .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
        .collect::<String>()
        .to_lowercase();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Case-folded substring containment after punctuation stripping.
#[derive(Debug, Default, Clone, Copy)]
pub struct SubstringMatcher;

impl PointMatcher for SubstringMatcher {
    fn matches(&self, response: &str, point: &str) -> Result<bool, RewardError> {
        let point = normalize_text(point);
        Ok(!point.is_empty() && normalize_text(response).contains(&point))
    }
}

/// Asks a chat model whether the response covers a point.
pub struct JudgePointMatcher<'a> {
    pub backend: &'a dyn ChatBackend,
    pub model: String,
}

impl PointMatcher for JudgePointMatcher<'_> {
    fn matches(&self, response: &str, point: &str) -> Result<bool, RewardError> {
        let prompt = prompts::point_matcher().render(&[("point", point), ("response", response)]);
        let reply = self
            .backend
            .complete(&ChatRequest::new(&self.model, vec![ChatMessage::user(prompt)]))
            .map_err(|e| RewardError::Matcher(e.to_string()))?;
        parse_true_false(&reply.text).ok_or_else(|| RewardError::Matcher(format!("unexpected reply {:?}", reply.text)))
    }
}

/// Reads a leading True/False (or yes/no) verdict.
pub fn parse_true_false(text: &str) -> Option<bool> {
    let first = text
        .split(|c: char| !c.is_alphanumeric())
        .find(|w| !w.is_empty())?
        .to_lowercase();
    match first.as_str() {
        "true" | "yes" | "correct" => Some(true),
        "false" | "no" | "incorrect" => Some(false),
        _ => None,
    }
}

/// Fraction of scoring points covered by `response`.
pub fn score_short_answer(
    response: &str,
    points: &[String],
    matcher: &dyn PointMatcher,
) -> Result<f64, RewardError> {
    if points.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for p in points {
        if matcher.matches(response, p)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / points.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub prompt: String,
    pub trajectory_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeResponse {
    pub consistent: bool,
    pub rationale: String,
}

/// Auxiliary-model consistency check over a full trajectory.
pub trait ConsistencyJudge: Send + Sync {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse, RewardError>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct AlwaysConsistent;

impl ConsistencyJudge for AlwaysConsistent {
    fn judge(&self, _: &JudgeRequest) -> Result<JudgeResponse, RewardError> {
        Ok(JudgeResponse { consistent: true, rationale: "mock: always consistent".into() })
    }
}

/// Deterministic mock: consistent iff the final conclusion mentions the answer literal.
#[derive(Debug, Default, Clone)]
pub struct ConclusionAgreementJudge {
    pub format: FormatConfig,
}

impl ConsistencyJudge for ConclusionAgreementJudge {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse, RewardError> {
        let parsed = match parse_trajectory(&RawTrajectory(req.trajectory_text.clone()), &self.format) {
            Ok(p) => p,
            Err(e) => {
                return Ok(JudgeResponse { consistent: false, rationale: format!("unparsable: {e}") })
            }
        };
        let consistent = mentions(&parsed.final_conclusion, &parsed.answer_literal);
        let rationale = if consistent {
            "conclusion supports the answer".to_string()
        } else {
            "conclusion does not mention the answer".to_string()
        };
        Ok(JudgeResponse { consistent, rationale })
    }
}

/// Word-boundary containment on normalized text.
fn mentions(haystack: &str, needle: &str) -> bool {
    let needle = normalize_text(needle);
    if needle.is_empty() {
        return false;
    }
    format!(" {} ", normalize_text(haystack)).contains(&format!(" {needle} "))
}

/// Replays a fixed verdict sequence, repeating the last verdict.
pub struct ScriptedJudge {
    verdicts: Vec<bool>,
    next: Mutex<usize>,
}

impl ScriptedJudge {
    pub fn new(verdicts: Vec<bool>) -> Self {
        Self { verdicts, next: Mutex::new(0) }
    }

    pub fn calls(&self) -> usize {
        *self.next.lock().unwrap_or_else(|e| e.into_inner())
    }
}

impl ConsistencyJudge for ScriptedJudge {
    fn judge(&self, _: &JudgeRequest) -> Result<JudgeResponse, RewardError> {
        let mut i = self.next.lock().unwrap_or_else(|e| e.into_inner());
        let v = self
            .verdicts
            .get(*i)
            .or(self.verdicts.last())
            .copied()
            .ok_or_else(|| RewardError::JudgeUnavailable("empty script".into()))?;
        *i += 1;
        Ok(JudgeResponse { consistent: v, rationale: format!("scripted verdict #{}", *i) })
    }
}

/// Live judge over the chat gateway. Expects a JSON object reply.
pub struct LlmConsistencyJudge<B: ChatBackend> {
    pub backend: B,
    pub model: String,
}

impl<B: ChatBackend> ConsistencyJudge for LlmConsistencyJudge<B> {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse, RewardError> {
        let prompt = prompts::consistency_judge()
            .render(&[("prompt", &req.prompt), ("trajectory_text", &req.trajectory_text)]);
        let reply = self
            .backend
            .complete(&ChatRequest::new(&self.model, vec![ChatMessage::user(prompt)]))?;
        parse_judge_reply(&reply.text)
    }
}

pub fn parse_judge_reply(text: &str) -> Result<JudgeResponse, RewardError> {
    let start = text.find('{');
    let end = text.rfind('}');
    if let (Some(s), Some(e)) = (start, end) {
        if s < e {
            if let Ok(r) = serde_json::from_str::<JudgeResponse>(&text[s..=e]) {
                return Ok(r);
            }
        }
    }
    Err(RewardError::JudgeUnavailable(format!("malformed judge reply: {text:?}")))
}

/// Memoizes verdicts by request.
pub struct CachedJudge<J: ConsistencyJudge> {
    inner: J,
    cache: Mutex<HashMap<(String, String), JudgeResponse>>,
}

impl<J: ConsistencyJudge> CachedJudge<J> {
    pub fn new(inner: J) -> Self {
        Self { inner, cache: Mutex::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.cache.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<J: ConsistencyJudge> ConsistencyJudge for CachedJudge<J> {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse, RewardError> {
        let key = (req.prompt.clone(), req.trajectory_text.clone());
        if let Some(hit) = self.cache.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
            return Ok(hit.clone());
        }
        let verdict = self.inner.judge(req)?;
        self.cache
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(key, verdict.clone());
        Ok(verdict)
    }
}

impl<J: ConsistencyJudge + ?Sized> ConsistencyJudge for &J {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse, RewardError> {
        (**self).judge(req)
    }
}

impl<J: ConsistencyJudge + ?Sized> ConsistencyJudge for Box<J> {
    fn judge(&self, req: &JudgeRequest) -> Result<JudgeResponse, RewardError> {
        (**self).judge(req)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format_gate: u8,
    pub length_gate: Option<u8>,
    pub consistency_gate: Option<u8>,
    pub quality: Option<f64>,
    pub reward: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

impl RewardBreakdown {
    fn zero_at(format: u8, length: Option<u8>, consistency: Option<u8>, diagnostics: Vec<String>) -> Self {
        Self {
            format_gate: format,
            length_gate: length,
            consistency_gate: consistency,
            quality: None,
            reward: 0.0,
            diagnostics,
        }
    }
}

/// Quality of an extracted answer against the task's gold answer.
pub fn quality_of(
    answer: &AnswerValue,
    task: &TaskSpec,
    matcher: &dyn PointMatcher,
) -> Result<f64, RewardError> {
    Ok(match (task.kind, answer) {
        (TaskKind::SingleChoice, AnswerValue::Label(l)) => {
            let gold = task.gold.label_set();
            gold.iter().next().map_or(0.0, |g| score_single_choice(l, g))
        }
        (TaskKind::MultiChoice, AnswerValue::Labels(ls)) => score_multi_choice(ls, &task.gold.label_set()),
        (TaskKind::MultiChoice, AnswerValue::Label(l)) => {
            score_multi_choice(&std::iter::once(l.clone()).collect(), &task.gold.label_set())
        }
        (TaskKind::ShortAnswer, AnswerValue::Text(t)) => {
            score_short_answer(t, task.gold.scoring_points(), matcher)?
        }
        _ => 0.0,
    })
}

fn conclusion_agrees(parsed: &ParsedTrajectory, answer: &AnswerValue) -> bool {
    match answer {
        AnswerValue::Label(l) => mentions(&parsed.final_conclusion, l),
        AnswerValue::Labels(ls) => ls.iter().all(|l| mentions(&parsed.final_conclusion, l)),
        AnswerValue::Text(_) => true,
    }
}

/// Composite reward with whitespace (or configured) think-token counting and
/// the substring point matcher.
pub fn compute_reward(
    raw: &RawTrajectory,
    task: &TaskSpec,
    cfg: &FormatConfig,
    judge: &dyn ConsistencyJudge,
) -> Result<RewardBreakdown, RewardError> {
    compute_reward_with(raw, None, task, cfg, judge, &SubstringMatcher)
}

pub fn compute_reward_with(
    raw: &RawTrajectory,
    reported_tokens: Option<usize>,
    task: &TaskSpec,
    cfg: &FormatConfig,
    judge: &dyn ConsistencyJudge,
    matcher: &dyn PointMatcher,
) -> Result<RewardBreakdown, RewardError> {
    let parsed = match parse_trajectory(raw, cfg) {
        Ok(p) => p,
        Err(e) => return Ok(RewardBreakdown::zero_at(0, None, None, vec![e.to_string()])),
    };

    let tokens = match count_think_tokens(&parsed, cfg.tokenization, reported_tokens) {
        Ok(n) => n,
        Err(e) => return Ok(RewardBreakdown::zero_at(1, Some(0), None, vec![e.to_string()])),
    };
    let report = validate(&parsed, cfg, tokens);
    if !report.format_valid {
        let diags = report.violations.into_iter().map(|f| f.message).collect();
        return Ok(RewardBreakdown::zero_at(0, None, None, diags));
    }
    if !report.length_valid {
        let diags = report.violations.into_iter().map(|f| f.message).collect();
        return Ok(RewardBreakdown::zero_at(1, Some(0), None, diags));
    }

    let verdict = judge.judge(&JudgeRequest {
        prompt: task.prompt.clone(),
        trajectory_text: raw.as_str().to_string(),
    })?;
    if !verdict.consistent {
        return Ok(RewardBreakdown::zero_at(1, Some(1), Some(0), vec![verdict.rationale]));
    }

    let mut diagnostics = Vec::new();
    let quality = match extract_answer(&parsed, task.kind) {
        Ok(answer) => {
            if !conclusion_agrees(&parsed, &answer) {
                diagnostics.push("final conclusion does not mention the answer".to_string());
            }
            quality_of(&answer, task, matcher)?
        }
        Err(e) => {
            diagnostics.push(e.to_string());
            0.0
        }
    };
    let quality = quality.clamp(0.0, 1.0);
    Ok(RewardBreakdown {
        format_gate: 1,
        length_gate: Some(1),
        consistency_gate: Some(1),
        quality: Some(quality),
        reward: quality,
        diagnostics,
    })
}
