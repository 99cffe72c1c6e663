//! Structured reasoning trajectory grammar.
//!
//! A well-formed trajectory looks like:
//!
//! ```text
//! <think>
//! ###Symptom Analysis
//! ...
//! ###Final Conclusion
//! ...
//! </think>
//! <answer>
//! ...
//! Answer: B
//! </answer>
//! ```
//!
//! Parsing is total: any input yields either a [`ParsedTrajectory`] or exactly
//! one [`FormatError`] naming the first violated rule.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::task::TaskKind;

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";
const ANSWER_OPEN: &str = "<answer>";
const ANSWER_CLOSE: &str = "</answer>";
const SUBTITLE_MARK: &str = "###";

/// Grammar violations. Every variant maps to a stable code via [`FormatError::code`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FormatError {
    #[error("missing <think>...</think> block")]
    MissingThinkBlock,
    #[error("missing <answer>...</answer> block")]
    MissingAnswerBlock,
    #[error("tag order violation: {0}")]
    TagOrderViolation(String),
    #[error("think block has content before the first ### subtitle")]
    UnsectionedThinkContent,
    #[error("conclusion section: {0}")]
    MissingConclusion(String),
    #[error("answer phase must end with a non-empty `{0}` line")]
    MissingAnswerPrefix(String),
    #[error("cannot render an empty trajectory: {0}")]
    EmptyContent(&'static str),
}

impl FormatError {
    pub fn code(&self) -> FindingCode {
        match self {
            FormatError::MissingThinkBlock => FindingCode::MissingThinkBlock,
            FormatError::MissingAnswerBlock => FindingCode::MissingAnswerBlock,
            FormatError::TagOrderViolation(_) => FindingCode::TagOrderViolation,
            FormatError::UnsectionedThinkContent => FindingCode::UnsectionedThinkContent,
            FormatError::MissingConclusion(_) => FindingCode::MissingConclusion,
            FormatError::MissingAnswerPrefix(_) => FindingCode::MissingAnswerPrefix,
            FormatError::EmptyContent(_) => FindingCode::EmptyContent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AnswerError {
    #[error("answer literal {0:?} yields no label")]
    UnparsableAnswer(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TokenCountError {
    #[error("generator-reported token count requested but none was supplied")]
    GeneratorCountUnavailable,
}

/// Raw model output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawTrajectory(pub String);

impl RawTrajectory {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for RawTrajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub subtitle: String,
    pub body: String,
}

impl Section {
    pub fn new(subtitle: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            subtitle: subtitle.into(),
            body: body.into(),
        }
    }
}

/// A trajectory split into its think sections and answer phase.
///
/// `think_sections` includes the conclusion section as its last entry;
/// `final_conclusion` repeats that section's body for convenience.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedTrajectory {
    pub think_sections: Vec<Section>,
    pub final_conclusion: String,
    pub answer_phase: String,
    pub answer_literal: String,
}

impl ParsedTrajectory {
    /// Canonical think-block text (subtitle lines and bodies, newline separated).
    pub fn think_text(&self) -> String {
        let mut out = String::new();
        for s in &self.think_sections {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(SUBTITLE_MARK);
            out.push_str(&s.subtitle);
            if !s.body.is_empty() {
                out.push('\n');
                out.push_str(&s.body);
            }
        }
        out
    }

    /// Sections preceding the final conclusion.
    pub fn body_sections(&self) -> &[Section] {
        let n = self.think_sections.len().saturating_sub(1);
        &self.think_sections[..n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizationMode {
    #[default]
    Whitespace,
    GeneratorReported,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormatConfig {
    pub min_think_tokens: usize,
    pub max_think_tokens: usize,
    pub conclusion_marker: String,
    pub answer_prefix: String,
    /// Tolerate whitespace before `<think>`, between the blocks and after `</answer>`.
    pub lenient_whitespace: bool,
    pub tokenization: TokenizationMode,
}

impl Default for FormatConfig {
    fn default() -> Self {
        Self {
            min_think_tokens: 10,
            max_think_tokens: 2048,
            conclusion_marker: "Final Conclusion".to_string(),
            answer_prefix: "Answer:".to_string(),
            lenient_whitespace: true,
            tokenization: TokenizationMode::Whitespace,
        }
    }
}

impl FormatConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.min_think_tokens == 0 || self.min_think_tokens >= self.max_think_tokens {
            return Err(format!(
                "format: need 0 < min_think_tokens < max_think_tokens, got {} and {}",
                self.min_think_tokens, self.max_think_tokens
            ));
        }
        if self.conclusion_marker.trim().is_empty() || self.answer_prefix.trim().is_empty() {
            return Err("format: conclusion_marker and answer_prefix must be non-empty".into());
        }
        Ok(())
    }

    fn is_conclusion(&self, subtitle: &str) -> bool {
        subtitle.trim().eq_ignore_ascii_case(self.conclusion_marker.trim())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingCode {
    MissingThinkBlock,
    MissingAnswerBlock,
    TagOrderViolation,
    UnsectionedThinkContent,
    MissingConclusion,
    MissingAnswerPrefix,
    EmptyContent,
    LengthBelowMin,
    LengthAboveMax,
    TokenCountUnavailable,
}

impl FindingCode {
    pub fn is_format_class(self) -> bool {
        !matches!(
            self,
            FindingCode::LengthBelowMin
                | FindingCode::LengthAboveMax
                | FindingCode::TokenCountUnavailable
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub code: FindingCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub format_valid: bool,
    /// Only meaningful when `format_valid` is true; false otherwise.
    pub length_valid: bool,
    pub token_count: Option<usize>,
    pub violations: Vec<Finding>,
}

impl ValidationReport {
    fn from_findings(violations: Vec<Finding>, token_count: Option<usize>) -> Self {
        let format_valid = !violations.iter().any(|f| f.code.is_format_class());
        let length_valid = format_valid && violations.is_empty();
        Self {
            format_valid,
            length_valid,
            token_count,
            violations,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.format_valid && self.length_valid
    }

    pub fn format_failure(err: &FormatError) -> Self {
        Self::from_findings(
            vec![Finding {
                code: err.code(),
                message: err.to_string(),
            }],
            None,
        )
    }
}

/// Answer extracted from the answer phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerValue {
    Label(String),
    Labels(BTreeSet<String>),
    Text(String),
}

/// Case-folds, trims and strips surrounding punctuation.
pub fn normalize_label(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c.is_whitespace() || c.is_ascii_punctuation())
        .to_lowercase()
}

fn find_all(text: &str, needle: &str) -> Vec<usize> {
    text.match_indices(needle).map(|(i, _)| i).collect()
}

/// Splits `text` into the four tag positions, checking presence and order.
fn locate_blocks<'a>(text: &'a str, cfg: &FormatConfig) -> Result<(&'a str, &'a str), FormatError> {
    let think_open = find_all(text, THINK_OPEN);
    let think_close = find_all(text, THINK_CLOSE);
    let answer_open = find_all(text, ANSWER_OPEN);
    let answer_close = find_all(text, ANSWER_CLOSE);

    if think_open.is_empty() || think_close.is_empty() {
        return Err(FormatError::MissingThinkBlock);
    }
    if answer_open.is_empty() || answer_close.is_empty() {
        return Err(FormatError::MissingAnswerBlock);
    }
    for (tag, hits) in [
        (THINK_OPEN, &think_open),
        (THINK_CLOSE, &think_close),
        (ANSWER_OPEN, &answer_open),
        (ANSWER_CLOSE, &answer_close),
    ] {
        if hits.len() > 1 {
            return Err(FormatError::TagOrderViolation(format!(
                "{tag} appears {} times",
                hits.len()
            )));
        }
    }
    let (to, tc, ao, ac) = (think_open[0], think_close[0], answer_open[0], answer_close[0]);
    if !(to < tc && tc < ao && ao < ac) {
        return Err(FormatError::TagOrderViolation(
            "expected <think>, </think>, <answer>, </answer> in that order".into(),
        ));
    }

    let outside = [
        ("before <think>", &text[..to]),
        ("between </think> and <answer>", &text[tc + THINK_CLOSE.len()..ao]),
        ("after </answer>", &text[ac + ANSWER_CLOSE.len()..]),
    ];
    for (where_, chunk) in outside {
        let allowed = if where_.starts_with("between") {
            chunk.trim().is_empty()
        } else if cfg.lenient_whitespace {
            chunk.trim().is_empty()
        } else {
            chunk.is_empty()
        };
        if !allowed {
            return Err(FormatError::TagOrderViolation(format!("text {where_}")));
        }
    }

    Ok((&text[to + THINK_OPEN.len()..tc], &text[ao + ANSWER_OPEN.len()..ac]))
}

fn split_sections(think: &str) -> Result<Vec<Section>, FormatError> {
    let mut sections: Vec<Section> = Vec::new();
    let mut body: Vec<&str> = Vec::new();
    let flush = |sections: &mut Vec<Section>, body: &mut Vec<&str>| {
        if let Some(last) = sections.last_mut() {
            last.body = body.join("\n").trim().to_string();
        }
        body.clear();
    };
    for line in think.lines() {
        let trimmed = line.trim();
        if let Some(sub) = trimmed.strip_prefix(SUBTITLE_MARK) {
            flush(&mut sections, &mut body);
            sections.push(Section::new(sub.trim(), ""));
        } else if sections.is_empty() {
            if !trimmed.is_empty() {
                return Err(FormatError::UnsectionedThinkContent);
            }
        } else {
            body.push(line);
        }
    }
    flush(&mut sections, &mut body);
    Ok(sections)
}

pub fn parse_trajectory(
    text: &RawTrajectory,
    cfg: &FormatConfig,
) -> Result<ParsedTrajectory, FormatError> {
    let (think, answer) = locate_blocks(text.as_str(), cfg)?;

    let sections = split_sections(think)?;
    let conclusions: Vec<usize> = sections
        .iter()
        .enumerate()
        .filter(|(_, s)| cfg.is_conclusion(&s.subtitle))
        .map(|(i, _)| i)
        .collect();
    match conclusions.as_slice() {
        [] => {
            return Err(FormatError::MissingConclusion(format!(
                "no ###{} section",
                cfg.conclusion_marker
            )))
        }
        [i] if *i + 1 == sections.len() => {}
        [_] => {
            return Err(FormatError::MissingConclusion(
                "conclusion is not the last section".into(),
            ))
        }
        _ => {
            return Err(FormatError::MissingConclusion(
                "more than one conclusion section".into(),
            ))
        }
    }

    let answer_phase = answer.trim().to_string();
    let last_line = answer_phase.lines().last().unwrap_or("").trim();
    let literal = last_line
        .strip_prefix(cfg.answer_prefix.as_str())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| FormatError::MissingAnswerPrefix(cfg.answer_prefix.clone()))?;

    let mut sections = sections;
    if let Some(last) = sections.last_mut() {
        last.subtitle = cfg.conclusion_marker.trim().to_string();
    }
    let final_conclusion = sections.last().map(|s| s.body.clone()).unwrap_or_default();
    Ok(ParsedTrajectory {
        answer_literal: literal.to_string(),
        think_sections: sections,
        final_conclusion,
        answer_phase,
    })
}

/// Whitespace token count of the think text, or the generator-reported count.
pub fn count_think_tokens(
    parsed: &ParsedTrajectory,
    mode: TokenizationMode,
    reported: Option<usize>,
) -> Result<usize, TokenCountError> {
    match mode {
        TokenizationMode::Whitespace => Ok(whitespace_tokens(&parsed.think_text())),
        TokenizationMode::GeneratorReported => {
            reported.ok_or(TokenCountError::GeneratorCountUnavailable)
        }
    }
}

pub fn whitespace_tokens(text: &str) -> usize {
    text.split_whitespace().count()
}

pub fn validate(parsed: &ParsedTrajectory, cfg: &FormatConfig, token_count: usize) -> ValidationReport {
    let mut findings: Vec<Finding> = Vec::new();
    let push = |findings: &mut Vec<Finding>, code, message: String| {
        findings.push(Finding { code, message })
    };

    match parsed.think_sections.last() {
        None => push(&mut findings, FindingCode::MissingConclusion, "no think sections".into()),
        Some(last) if !cfg.is_conclusion(&last.subtitle) => push(
            &mut findings,
            FindingCode::MissingConclusion,
            "last section is not the conclusion".into(),
        ),
        Some(_) => {
            let n = parsed
                .think_sections
                .iter()
                .filter(|s| cfg.is_conclusion(&s.subtitle))
                .count();
            if n > 1 {
                push(&mut findings, FindingCode::MissingConclusion, "more than one conclusion section".into());
            }
        }
    }
    if parsed.answer_literal.trim().is_empty() {
        push(
            &mut findings,
            FindingCode::MissingAnswerPrefix,
            format!("empty text after `{}`", cfg.answer_prefix),
        );
    }

    if findings.is_empty() {
        if token_count < cfg.min_think_tokens {
            push(
                &mut findings,
                FindingCode::LengthBelowMin,
                format!("{token_count} think tokens < minimum {}", cfg.min_think_tokens),
            );
        } else if token_count > cfg.max_think_tokens {
            push(
                &mut findings,
                FindingCode::LengthAboveMax,
                format!("{token_count} think tokens > maximum {}", cfg.max_think_tokens),
            );
        }
    }
    ValidationReport::from_findings(findings, Some(token_count))
}

/// Parse + count + validate in one pass. Parse failures become a format finding.
pub fn validate_text(
    raw: &RawTrajectory,
    cfg: &FormatConfig,
    reported_tokens: Option<usize>,
) -> (Option<ParsedTrajectory>, ValidationReport) {
    match parse_trajectory(raw, cfg) {
        Err(e) => (None, ValidationReport::format_failure(&e)),
        Ok(parsed) => match count_think_tokens(&parsed, cfg.tokenization, reported_tokens) {
            Ok(n) => {
                let report = validate(&parsed, cfg, n);
                (Some(parsed), report)
            }
            Err(e) => {
                let report = ValidationReport {
                    format_valid: true,
                    length_valid: false,
                    token_count: None,
                    violations: vec![Finding {
                        code: FindingCode::TokenCountUnavailable,
                        message: e.to_string(),
                    }],
                };
                (Some(parsed), report)
            }
        },
    }
}

fn split_labels(literal: &str) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for chunk in literal.split([',', ';', '&']) {
        let mut piece = String::new();
        for word in chunk.split_whitespace() {
            if word.eq_ignore_ascii_case("and") {
                let label = normalize_label(&piece);
                if !label.is_empty() {
                    out.insert(label);
                }
                piece.clear();
            } else {
                if !piece.is_empty() {
                    piece.push(' ');
                }
                piece.push_str(word);
            }
        }
        let label = normalize_label(&piece);
        if !label.is_empty() {
            out.insert(label);
        }
    }
    out
}

/// Separators for multi-choice literals: `,`, `;`, `&` and the word `and`.
pub fn extract_answer(parsed: &ParsedTrajectory, kind: TaskKind) -> Result<AnswerValue, AnswerError> {
    match kind {
        TaskKind::ShortAnswer => Ok(AnswerValue::Text(format!(
            "{}\n{}",
            parsed.final_conclusion, parsed.answer_literal
        ))),
        _ => answer_from_literal(&parsed.answer_literal, kind),
    }
}

/// Interprets a bare answer literal. Short answers are kept verbatim.
pub fn answer_from_literal(literal: &str, kind: TaskKind) -> Result<AnswerValue, AnswerError> {
    match kind {
        TaskKind::SingleChoice => {
            let label = normalize_label(literal);
            if label.is_empty() {
                return Err(AnswerError::UnparsableAnswer(literal.to_string()));
            }
            Ok(AnswerValue::Label(label))
        }
        TaskKind::MultiChoice => {
            let labels = split_labels(literal);
            if labels.is_empty() {
                return Err(AnswerError::UnparsableAnswer(literal.to_string()));
            }
            Ok(AnswerValue::Labels(labels))
        }
        TaskKind::ShortAnswer => Ok(AnswerValue::Text(literal.trim().to_string())),
    }
}

fn clean_line_content(s: &str) -> bool {
    s.lines().all(|l| {
        let t = l.trim_start();
        !t.starts_with(SUBTITLE_MARK)
    }) && ![THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE]
        .iter()
        .any(|t| s.contains(t))
}

/// Canonical writer.
///
/// `answer` is either a full answer phase ending in an `Answer:` line, or a
/// bare answer literal which is then rendered as `Answer: <literal>`.
pub fn render(
    sections: &[Section],
    conclusion: &str,
    answer: &str,
    cfg: &FormatConfig,
) -> Result<RawTrajectory, FormatError> {
    if sections.is_empty() {
        return Err(FormatError::EmptyContent("no reasoning sections"));
    }
    let answer = answer.trim();
    if answer.is_empty() {
        return Err(FormatError::EmptyContent("empty answer"));
    }
    let mut text = String::from(THINK_OPEN);
    text.push('\n');
    for s in sections {
        if cfg.is_conclusion(&s.subtitle) || !clean_line_content(&s.body) || s.subtitle.contains('\n')
        {
            return Err(FormatError::TagOrderViolation(format!(
                "section {:?} cannot be rendered canonically",
                s.subtitle
            )));
        }
        push_section(&mut text, s.subtitle.trim(), s.body.trim());
    }
    if !clean_line_content(conclusion) {
        return Err(FormatError::TagOrderViolation("conclusion contains markup".into()));
    }
    push_section(&mut text, cfg.conclusion_marker.trim(), conclusion.trim());
    text.push_str(THINK_CLOSE);
    text.push('\n');
    text.push_str(ANSWER_OPEN);
    text.push('\n');

    let ends_with_prefix = answer
        .lines()
        .last()
        .map(|l| l.trim().starts_with(cfg.answer_prefix.as_str()))
        .unwrap_or(false);
    if !clean_line_content(answer) {
        return Err(FormatError::TagOrderViolation("answer contains markup".into()));
    }
    if ends_with_prefix {
        text.push_str(answer);
    } else {
        if answer.contains('\n') {
            return Err(FormatError::MissingAnswerPrefix(cfg.answer_prefix.clone()));
        }
        text.push_str(&cfg.answer_prefix);
        text.push(' ');
        text.push_str(answer);
    }
    text.push('\n');
    text.push_str(ANSWER_CLOSE);

    Ok(RawTrajectory(text))
}

/// Re-renders a parsed trajectory.
pub fn render_parsed(parsed: &ParsedTrajectory, cfg: &FormatConfig) -> Result<RawTrajectory, FormatError> {
    render(parsed.body_sections(), &parsed.final_conclusion, &parsed.answer_phase, cfg)
}

fn push_section(text: &mut String, subtitle: &str, body: &str) {
    text.push_str(SUBTITLE_MARK);
    text.push_str(subtitle);
    text.push('\n');
    if !body.is_empty() {
        text.push_str(body);
        text.push('\n');
    }
}
