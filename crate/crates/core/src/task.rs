//! Task specifications and the line-delimited JSON dataset schema.
//!
//! Each dataset line is `{id, task_kind, prompt, options?, gold, metric, split}`
//! where `gold` is a label, a list of labels, or `{"scoring_points": [...]}`.

use std::collections::{BTreeSet, HashSet};
use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::normalize_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    SingleChoice,
    MultiChoice,
    ShortAnswer,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GoldAnswer {
    Label(String),
    Labels(Vec<String>),
    Points { scoring_points: Vec<String> },
}

impl GoldAnswer {
    pub fn label_set(&self) -> BTreeSet<String> {
        match self {
            GoldAnswer::Label(l) => std::iter::once(normalize_label(l)).collect(),
            GoldAnswer::Labels(ls) => ls.iter().map(|l| normalize_label(l)).collect(),
            GoldAnswer::Points { .. } => BTreeSet::new(),
        }
    }

    pub fn scoring_points(&self) -> &[String] {
        match self {
            GoldAnswer::Points { scoring_points } => scoring_points,
            _ => &[],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    MicroF1,
    MacroF1,
    Jaccard,
    PointRecall,
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("task {id}: {reason}")]
    Invalid { id: String, reason: String },
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("duplicate task id {0}")]
    DuplicateId(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One problem: prompt, task kind, options and gold answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: String,
    #[serde(rename = "task_kind")]
    pub kind: TaskKind,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub gold: GoldAnswer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric: Option<MetricKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

impl TaskSpec {
    pub fn check(&self) -> Result<(), TaskError> {
        let invalid = |reason: &str| TaskError::Invalid {
            id: self.id.clone(),
            reason: reason.to_string(),
        };
        let options: Option<HashSet<String>> = self
            .options
            .as_ref()
            .map(|o| o.iter().map(|l| normalize_label(l)).collect());
        let within_options = |labels: &BTreeSet<String>| match &options {
            Some(opts) => labels.iter().all(|l| opts.contains(l)),
            None => true,
        };
        match (self.kind, &self.gold) {
            (TaskKind::SingleChoice, GoldAnswer::Label(l)) => {
                if normalize_label(l).is_empty() {
                    return Err(invalid("empty gold label"));
                }
                if !within_options(&self.gold.label_set()) {
                    return Err(invalid("gold label not among options"));
                }
            }
            (TaskKind::MultiChoice, GoldAnswer::Labels(_) | GoldAnswer::Label(_)) => {
                let set = self.gold.label_set();
                if set.is_empty() || set.iter().any(|l| l.is_empty()) {
                    return Err(invalid("multi-choice gold must be a non-empty label set"));
                }
                if !within_options(&set) {
                    return Err(invalid("gold labels not a subset of options"));
                }
            }
            (TaskKind::ShortAnswer, GoldAnswer::Points { scoring_points }) => {
                if scoring_points.is_empty() {
                    return Err(invalid("short-answer gold needs at least one scoring point"));
                }
            }
            _ => return Err(invalid("gold shape does not match task kind")),
        }
        Ok(())
    }
}

/// Reads a dataset file, validating every task and rejecting duplicate ids.
pub fn load_tasks(path: &Path) -> Result<Vec<TaskSpec>, TaskError> {
    let file = std::fs::File::open(path)?;
    read_tasks(std::io::BufReader::new(file))
}

pub fn read_tasks(reader: impl BufRead) -> Result<Vec<TaskSpec>, TaskError> {
    let mut tasks = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: TaskSpec =
            serde_json::from_str(&line).map_err(|source| TaskError::Json { line: i + 1, source })?;
        task.check()?;
        if !seen.insert(task.id.clone()) {
            return Err(TaskError::DuplicateId(task.id));
        }
        tasks.push(task);
    }
    Ok(tasks)
}
