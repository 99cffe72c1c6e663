//! Synthetic copy task: the prompt names a label and the correct single-choice
//! answer is that label. Used for end-to-end runs of the trainer.

use crate::format::{render, FormatConfig, Section};
use crate::optim::SftExample;
use crate::policy::{Policy, PolicyError, ToyPolicy};
use crate::task::{GoldAnswer, MetricKind, TaskKind, TaskSpec};

const LABELS: [&str; 8] = ["A", "B", "C", "D", "E", "F", "G", "H"];

pub struct CopyTask {
    pub tasks: Vec<TaskSpec>,
    pub expert: Vec<String>,
}

impl CopyTask {
    /// `n_labels` is clamped to 1..=8.
    pub fn new(n_labels: usize) -> Self {
        let labels = &LABELS[..n_labels.clamp(1, LABELS.len())];
        let options: Vec<String> = labels.iter().map(|s| s.to_string()).collect();
        let cfg = FormatConfig::default();
        let mut tasks = Vec::new();
        let mut expert = Vec::new();
        for label in labels {
            tasks.push(TaskSpec {
                id: format!("copy-{label}"),
                kind: TaskKind::SingleChoice,
                prompt: format!("Copy the label: {label}"),
                options: Some(options.clone()),
                gold: GoldAnswer::Label(label.to_string()),
                metric: Some(MetricKind::MicroF1),
                split: Some("train".into()),
            });
            let text = render(
                &[Section::new("Analysis", "copy the label from the prompt now")],
                &format!("the label is {label}"),
                label,
                &cfg,
            )
            .expect("expert trajectory renders");
            expert.push(text.0);
        }
        Self { tasks, expert }
    }

    /// Toy policy whose vocabulary covers every expert trajectory.
    pub fn policy(&self) -> ToyPolicy {
        ToyPolicy::from_corpus(self.expert.iter().map(String::as_str), 16, 24)
    }

    pub fn sft_examples(&self, policy: &dyn Policy) -> Result<Vec<SftExample>, PolicyError> {
        self.tasks
            .iter()
            .zip(&self.expert)
            .map(|(t, text)| Ok(SftExample { prompt: t.prompt.clone(), target: policy.encode(text)? }))
            .collect()
    }
}
