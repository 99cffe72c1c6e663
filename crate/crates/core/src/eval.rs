//! Benchmark metrics, rubric aggregation and binary inter-annotator agreement.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{normalize_label, AnswerValue};
use crate::reward::{score_multi_choice, score_short_answer, PointMatcher, RewardError, SubstringMatcher};
use crate::task::{GoldAnswer, MetricKind, TaskKind};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EvalError {
    #[error("no items to evaluate")]
    Empty,
    #[error("metric {metric:?} does not apply to {kind:?} tasks")]
    KindMismatch { metric: MetricKind, kind: TaskKind },
    #[error("duplicate item id {0:?}")]
    DuplicateId(String),
    #[error("item {id:?} does not match task kind {kind:?}")]
    MixedKinds { id: String, kind: TaskKind },
    #[error("rubric sheets are misaligned: {0}")]
    Misaligned(String),
    #[error("rubric score {score} for case {case:?} is not 0 or 1")]
    InvalidScore { case: String, score: u8 },
    #[error("agreement needs at least 2 paired ratings, got {0}")]
    TooFewRatings(usize),
    #[error("rating {0} is not binary")]
    NonBinaryRating(u8),
    #[error("agreement needs exactly 2 annotators, got {0}")]
    AnnotatorCount(usize),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionItem {
    pub id: String,
    pub predicted: AnswerValue,
    pub gold: GoldAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub kind: TaskKind,
    pub items: Vec<PredictionItem>,
}

impl PredictionSet {
    pub fn new(kind: TaskKind, items: Vec<PredictionItem>) -> Result<Self, EvalError> {
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.id.as_str()) {
                return Err(EvalError::DuplicateId(it.id.clone()));
            }
            let ok = matches!(
                (kind, &it.predicted, &it.gold),
                (TaskKind::SingleChoice, AnswerValue::Label(_), GoldAnswer::Label(_))
                    | (TaskKind::MultiChoice, AnswerValue::Labels(_) | AnswerValue::Label(_), GoldAnswer::Labels(_) | GoldAnswer::Label(_))
                    | (TaskKind::ShortAnswer, AnswerValue::Text(_), GoldAnswer::Points { .. })
            );
            if !ok {
                return Err(EvalError::MixedKinds { id: it.id.clone(), kind });
            }
        }
        Ok(Self { kind, items })
    }
}

/// Prediction file line: `{id, task_kind, predicted, gold}` where `predicted`
/// is a string or a list of labels.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredictionLine {
    id: String,
    task_kind: TaskKind,
    predicted: Predicted,
    gold: GoldAnswer,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Predicted {
    One(String),
    Many(Vec<String>),
}

fn to_answer(kind: TaskKind, p: Predicted) -> AnswerValue {
    match (kind, p) {
        (TaskKind::SingleChoice, Predicted::One(s)) => AnswerValue::Label(normalize_label(&s)),
        (TaskKind::SingleChoice, Predicted::Many(v)) => {
            AnswerValue::Label(normalize_label(&v.join(",")))
        }
        (TaskKind::MultiChoice, Predicted::One(s)) => match crate::format::answer_from_literal(&s, kind) {
            Ok(a) => a,
            Err(_) => AnswerValue::Labels(BTreeSet::new()),
        },
        (TaskKind::MultiChoice, Predicted::Many(v)) => AnswerValue::Labels(
            v.iter().map(|s| normalize_label(s)).filter(|s| !s.is_empty()).collect(),
        ),
        (TaskKind::ShortAnswer, Predicted::One(s)) => AnswerValue::Text(s),
        (TaskKind::ShortAnswer, Predicted::Many(v)) => AnswerValue::Text(v.join("\n")),
    }
}

pub fn read_predictions(reader: impl BufRead) -> Result<PredictionSet, EvalError> {
    let mut kind = None;
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredictionLine = serde_json::from_str(&line)
            .map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() })?;
        let k = *kind.get_or_insert(rec.task_kind);
        if k != rec.task_kind {
            return Err(EvalError::MixedKinds { id: rec.id, kind: k });
        }
        items.push(PredictionItem { id: rec.id, predicted: to_answer(k, rec.predicted), gold: rec.gold });
    }
    PredictionSet::new(kind.ok_or(EvalError::Empty)?, items)
}

pub fn load_predictions(path: &Path) -> Result<PredictionSet, EvalError> {
    let f = std::fs::File::open(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    read_predictions(std::io::BufReader::new(f))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: MetricKind,
    pub value: f64,
    pub support: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<ClassStats>,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

fn predicted_set(a: &AnswerValue) -> BTreeSet<String> {
    match a {
        AnswerValue::Label(l) => std::iter::once(normalize_label(l)).filter(|l| !l.is_empty()).collect(),
        AnswerValue::Labels(ls) => ls.iter().map(|l| normalize_label(l)).collect(),
        AnswerValue::Text(_) => BTreeSet::new(),
    }
}

/// Per-class counts over the union of gold and predicted labels.
fn class_stats(items: &[PredictionItem]) -> Vec<ClassStats> {
    let mut counts: BTreeMap<String, (usize, usize, usize)> = BTreeMap::new();
    for it in items {
        let p = predicted_set(&it.predicted);
        let g = it.gold.label_set();
        for l in p.union(&g) {
            let c = counts.entry(l.clone()).or_default();
            match (p.contains(l), g.contains(l)) {
                (true, true) => c.0 += 1,
                (true, false) => c.1 += 1,
                (false, true) => c.2 += 1,
                (false, false) => {}
            }
        }
    }
    counts
        .into_iter()
        .map(|(label, (tp, fp, fn_))| ClassStats { label, tp, fp, fn_, f1: f1(tp, fp, fn_) })
        .collect()
}

pub fn compute_metric(metric: MetricKind, preds: &PredictionSet) -> Result<MetricReport, EvalError> {
    compute_metric_with(metric, preds, &SubstringMatcher)
}

pub fn compute_metric_with(
    metric: MetricKind,
    preds: &PredictionSet,
    matcher: &dyn PointMatcher,
) -> Result<MetricReport, EvalError> {
    let kind = preds.kind;
    let applicable = match metric {
        MetricKind::MicroF1 | MetricKind::MacroF1 | MetricKind::Jaccard => kind != TaskKind::ShortAnswer,
        MetricKind::PointRecall => kind == TaskKind::ShortAnswer,
    };
    if !applicable {
        return Err(EvalError::KindMismatch { metric, kind });
    }
    if preds.items.is_empty() {
        return Err(EvalError::Empty);
    }
    let n = preds.items.len();
    let (value, per_class) = match metric {
        MetricKind::MicroF1 => {
            let stats = class_stats(&preds.items);
            let (tp, fp, fn_) = stats.iter().fold((0, 0, 0), |a, c| (a.0 + c.tp, a.1 + c.fp, a.2 + c.fn_));
            (f1(tp, fp, fn_), stats)
        }
        MetricKind::MacroF1 => {
            let stats = class_stats(&preds.items);
            let v = if stats.is_empty() { 0.0 } else { stats.iter().map(|c| c.f1).sum::<f64>() / stats.len() as f64 };
            (v, stats)
        }
        MetricKind::Jaccard => {
            let sum: f64 = preds
                .items
                .iter()
                .map(|it| score_multi_choice(&predicted_set(&it.predicted), &it.gold.label_set()))
                .sum();
            (sum / n as f64, Vec::new())
        }
        MetricKind::PointRecall => {
            let mut sum = 0.0;
            for it in &preds.items {
                let AnswerValue::Text(t) = &it.predicted else { continue };
                sum += score_short_answer(t, it.gold.scoring_points(), matcher)?;
            }
            (sum / n as f64, Vec::new())
        }
    };
    Ok(MetricReport { metric, value: value.clamp(0.0, 1.0), support: n, per_class })
}

pub const RUBRIC_DIMENSIONS: [&str; 5] = ["R1", "R2", "R3", "R4", "R5"];

/// One rubric line: binary scores for R1..R5 (conciseness, coherence,
/// no hallucination, task understanding, internal consistency).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RubricRow {
    pub annotator: String,
    #[serde(default)]
    pub system: String,
    pub case_id: String,
    pub scores: [u8; 5],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RubricSheet {
    pub annotator: String,
    pub rows: Vec<RubricRow>,
}

pub fn read_rubric(reader: impl BufRead) -> Result<Vec<RubricSheet>, EvalError> {
    let mut sheets: Vec<RubricSheet> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: RubricRow = serde_json::from_str(&line)
            .map_err(|e| EvalError::Parse { line: i + 1, message: e.to_string() })?;
        match sheets.iter_mut().find(|s| s.annotator == row.annotator) {
            Some(s) => s.rows.push(row),
            None => sheets.push(RubricSheet { annotator: row.annotator.clone(), rows: vec![row] }),
        }
    }
    Ok(sheets)
}

pub fn load_rubric(path: &Path) -> Result<Vec<RubricSheet>, EvalError> {
    let f = std::fs::File::open(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
    read_rubric(std::io::BufReader::new(f))
}

type CaseKey = (String, String);

fn keyed(sheet: &RubricSheet) -> Result<BTreeMap<CaseKey, [u8; 5]>, EvalError> {
    let mut out = BTreeMap::new();
    for r in &sheet.rows {
        if let Some(&s) = r.scores.iter().find(|&&s| s > 1) {
            return Err(EvalError::InvalidScore { case: r.case_id.clone(), score: s });
        }
        if out.insert((r.system.clone(), r.case_id.clone()), r.scores).is_some() {
            return Err(EvalError::DuplicateId(format!("{}/{}", r.annotator, r.case_id)));
        }
    }
    Ok(out)
}

/// Checks every sheet covers the same cases and returns them keyed.
fn aligned(sheets: &[RubricSheet]) -> Result<Vec<BTreeMap<CaseKey, [u8; 5]>>, EvalError> {
    if sheets.is_empty() || sheets.iter().all(|s| s.rows.is_empty()) {
        return Err(EvalError::Empty);
    }
    let maps = sheets.iter().map(keyed).collect::<Result<Vec<_>, _>>()?;
    for (s, m) in sheets.iter().zip(&maps).skip(1) {
        if !m.keys().eq(maps[0].keys()) {
            return Err(EvalError::Misaligned(format!(
                "annotator {:?} rates a different case set than {:?}",
                s.annotator, sheets[0].annotator
            )));
        }
    }
    Ok(maps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricSummary {
    pub dimensions: [f64; 5],
    pub r_avg: f64,
    pub cases: usize,
}

/// Per-dimension means over cases and annotators, plus their grand mean.
pub fn rubric_average(sheets: &[RubricSheet]) -> Result<RubricSummary, EvalError> {
    let maps = aligned(sheets)?;
    let mut sums = [0.0f64; 5];
    let mut n = 0usize;
    for m in &maps {
        for scores in m.values() {
            for (s, &v) in sums.iter_mut().zip(scores) {
                *s += v as f64;
            }
            n += 1;
        }
    }
    let dimensions = sums.map(|s| s / n as f64);
    Ok(RubricSummary { dimensions, r_avg: dimensions.iter().sum::<f64>() / 5.0, cases: maps[0].len() })
}

/// Per-system rubric summaries, systems in first-seen order.
pub fn rubric_by_system(sheets: &[RubricSheet]) -> Result<Vec<(String, RubricSummary)>, EvalError> {
    aligned(sheets)?;
    let mut systems: Vec<String> = Vec::new();
    for r in sheets.iter().flat_map(|s| &s.rows) {
        if !systems.contains(&r.system) {
            systems.push(r.system.clone());
        }
    }
    systems
        .into_iter()
        .map(|sys| {
            let sub: Vec<RubricSheet> = sheets
                .iter()
                .map(|s| RubricSheet {
                    annotator: s.annotator.clone(),
                    rows: s.rows.iter().filter(|r| r.system == sys).cloned().collect(),
                })
                .collect();
            rubric_average(&sub).map(|r| (sys, r))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementKind {
    Percent,
    CohenKappa,
    GwetAc1,
}

/// Paired binary ratings: `a` both 1, `b` first 1 second 0, `c` first 0
/// second 1, `d` both 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct BinaryTable {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl BinaryTable {
    pub fn from_pairs(pairs: &[(u8, u8)]) -> Result<Self, EvalError> {
        let mut t = Self::default();
        for &(x, y) in pairs {
            match (x, y) {
                (1, 1) => t.a += 1,
                (1, 0) => t.b += 1,
                (0, 1) => t.c += 1,
                (0, 0) => t.d += 1,
                (v, 0 | 1) | (_, v) => return Err(EvalError::NonBinaryRating(v)),
            }
        }
        Ok(t)
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }
}

/// Binary agreement coefficient. Kappa with `p_e = 1` (both raters constant
/// and identical) is 1 by convention.
pub fn agreement(table: &BinaryTable, kind: AgreementKind) -> Result<f64, EvalError> {
    let n = table.total();
    if n < 2 {
        return Err(EvalError::TooFewRatings(n as usize));
    }
    let n = n as f64;
    let p_o = (table.a + table.d) as f64 / n;
    let p1 = (table.a + table.b) as f64 / n;
    let p2 = (table.a + table.c) as f64 / n;
    Ok(match kind {
        AgreementKind::Percent => p_o,
        AgreementKind::CohenKappa => {
            let p_e = p1 * p2 + (1.0 - p1) * (1.0 - p2);
            if 1.0 - p_e <= f64::EPSILON {
                if p_o >= 1.0 { 1.0 } else { 0.0 }
            } else {
                (p_o - p_e) / (1.0 - p_e)
            }
        }
        AgreementKind::GwetAc1 => {
            let pi = (p1 + p2) / 2.0;
            let p_e = 2.0 * pi * (1.0 - pi);
            (p_o - p_e) / (1.0 - p_e)
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub gwet_ac1: [f64; 5],
    pub cohen_kappa: [f64; 5],
    pub percent: [f64; 5],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub annotators: [String; 2],
    pub systems: Vec<(String, RubricSummary)>,
    pub agreement: AgreementRow,
}

fn mean5(v: &[f64; 5]) -> f64 {
    v.iter().sum::<f64>() / 5.0
}

/// Rubric scores per system and per-dimension agreement between two annotators.
pub fn agreement_report(sheets: &[RubricSheet]) -> Result<AgreementReport, EvalError> {
    if sheets.len() != 2 {
        return Err(EvalError::AnnotatorCount(sheets.len()));
    }
    let maps = aligned(sheets)?;
    let mut row = AgreementRow { gwet_ac1: [0.0; 5], cohen_kappa: [0.0; 5], percent: [0.0; 5] };
    for d in 0..5 {
        let pairs: Vec<(u8, u8)> = maps[0].iter().map(|(k, s)| (s[d], maps[1][k][d])).collect();
        let t = BinaryTable::from_pairs(&pairs)?;
        row.gwet_ac1[d] = agreement(&t, AgreementKind::GwetAc1)?;
        row.cohen_kappa[d] = agreement(&t, AgreementKind::CohenKappa)?;
        row.percent[d] = agreement(&t, AgreementKind::Percent)?;
    }
    Ok(AgreementReport {
        annotators: [sheets[0].annotator.clone(), sheets[1].annotator.clone()],
        systems: rubric_by_system(sheets)?,
        agreement: row,
    })
}

fn table_line(out: &mut String, name: &str, vals: &[f64; 5], avg: f64) {
    let _ = write!(out, "{name:<16}");
    for v in vals.iter().chain(std::iter::once(&avg)) {
        let _ = write!(out, " {v:>7.4}");
    }
    out.push('\n');
}

/// Plain-text table: one row per system, then the agreement rows.
pub fn render_agreement_table(r: &AgreementReport) -> String {
    let mut out = String::new();
    let _ = write!(out, "{:<16}", "");
    for h in RUBRIC_DIMENSIONS.iter().chain(std::iter::once(&"Avg")) {
        let _ = write!(out, " {h:>7}");
    }
    out.push('\n');
    out.push_str("-- Annotation Scores\n");
    for (sys, s) in &r.systems {
        let name = if sys.is_empty() { "(all)" } else { sys.as_str() };
        table_line(&mut out, name, &s.dimensions, s.r_avg);
    }
    out.push_str("-- Inter-Annotator Agreement\n");
    let a = &r.agreement;
    table_line(&mut out, "Gwet AC1", &a.gwet_ac1, mean5(&a.gwet_ac1));
    table_line(&mut out, "Cohen's Kappa", &a.cohen_kappa, mean5(&a.cohen_kappa));
    table_line(&mut out, "Consistency", &a.percent, mean5(&a.percent));
    out
}
