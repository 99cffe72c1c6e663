//! Iterative hybrid training loop.
//!
//! Each step samples an SFT mini-batch and a set of RL prompts, rolls out K
//! completions per prompt, scores them with the gated reward, normalizes
//! advantages per group, mixes the φ-weighted SFT loss with the GRPO loss
//! using μ(t), and applies one Adam update.
//!
//! Checkpoints are written to `<dir>/ckpt/step-<n>/checkpoint.bin`: one JSON
//! header line followed by the parameters, Adam first moments and Adam
//! second moments as little-endian `f64`.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{FormatConfig, RawTrajectory};
use crate::optim::{
    adam_step, grpo_loss, sft_phi_loss, total_loss_grad, AdamState, LossConfig, OptimError, OptimizerConfig,
    RolloutCompletion, RolloutGroup, SftExample,
};
use crate::policy::{Policy, PolicyError};
use crate::reward::{compute_reward, CachedJudge, ConsistencyJudge, RewardError};
use crate::schedule::{mu, ScheduleConfig};
use crate::task::TaskSpec;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
const CHECKPOINT_MAGIC: &str = "mentra-ckpt";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dataset {0} is empty")]
    DatasetEmpty(&'static str),
    #[error("invalid trainer configuration: {0}")]
    Config(String),
    #[error("writing checkpoint {path}: {source}")]
    CheckpointWriteFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("reading checkpoint {path}: {reason}")]
    CheckpointRead { path: PathBuf, reason: String },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub total_steps: u64,
    pub sft_batch: usize,
    pub rollout_k: usize,
    /// Prompts rolled out per step; the RL token batch varies with completion length.
    pub rl_prompts_per_step: usize,
    pub temperature: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub judge_cache: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            total_steps: 1000,
            sft_batch: 64,
            rollout_k: 8,
            rl_prompts_per_step: 8,
            temperature: 1.0,
            checkpoint_every: 10,
            seed: 0,
            judge_cache: false,
        }
    }
}

impl TrainerConfig {
    pub fn check(&self) -> Result<(), String> {
        if self.sft_batch == 0 || self.rollout_k == 0 || self.rl_prompts_per_step == 0 || self.checkpoint_every == 0
        {
            return Err("trainer: all counts must be >= 1".into());
        }
        if !(self.temperature > 0.0) {
            return Err("trainer: temperature must be > 0".into());
        }
        Ok(())
    }
}

/// Everything except the data, policy and judge.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSettings {
    pub trainer: TrainerConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub format: FormatConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub mu: f64,
    pub sft_loss: f64,
    pub grpo_loss: f64,
    pub total_loss: f64,
    pub mean_reward: f64,
    /// Realized RL batch size in tokens.
    pub b_rl: usize,
    pub rl_completions: usize,
    pub generator_calls: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("step record serializes"))
            .map(|l| l + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    /// Mean reward over the last `window` records ending at index `end` (inclusive).
    pub fn trailing_mean_reward(&self, end: usize, window: usize) -> f64 {
        let start = (end + 1).saturating_sub(window);
        let slice = &self.records[start..=end];
        slice.iter().map(|r| r.mean_reward).sum::<f64>() / slice.len() as f64
    }
}

/// Mutable training state; everything a checkpoint must capture.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub seed: u64,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(params: Vec<f64>, seed: u64) -> Self {
        let adam = AdamState::new(params.len());
        Self { step: 0, params, adam, seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    step: u64,
    seed: u64,
    rng_word_pos: String,
    adam_step: u64,
    n_params: usize,
    sections: Vec<String>,
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("ckpt").join(format!("step-{step}")).join(CHECKPOINT_FILE)
}

pub fn write_checkpoint(dir: &Path, state: &TrainState) -> Result<PathBuf, TrainError> {
    let path = checkpoint_path(dir, state.step);
    let fail = |source| TrainError::CheckpointWriteFailure { path: path.clone(), source };
    fs::create_dir_all(path.parent().expect("checkpoint path has a parent")).map_err(fail)?;
    let header = CheckpointHeader {
        format: CHECKPOINT_MAGIC.into(),
        version: 1,
        step: state.step,
        seed: state.seed,
        rng_word_pos: state.rng.get_word_pos().to_string(),
        adam_step: state.adam.step,
        n_params: state.params.len(),
        sections: vec!["params".into(), "adam_m".into(), "adam_v".into()],
    };
    let mut buf = serde_json::to_vec(&header).expect("header serializes");
    buf.push(b'\n');
    for section in [&state.params, &state.adam.m, &state.adam.v] {
        for x in section.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    let mut f = fs::File::create(&path).map_err(fail)?;
    f.write_all(&buf).map_err(fail)?;
    Ok(path)
}

pub fn read_checkpoint(path: &Path) -> Result<TrainState, TrainError> {
    let bad = |reason: String| TrainError::CheckpointRead { path: path.to_path_buf(), reason };
    let f = fs::File::open(path).map_err(|e| bad(e.to_string()))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end()).map_err(|e| bad(e.to_string()))?;
    if header.format != CHECKPOINT_MAGIC || header.version != 1 {
        return Err(bad(format!("unsupported format {} v{}", header.format, header.version)));
    }
    let n = header.n_params;
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload).map_err(|e| bad(e.to_string()))?;
    if payload.len() != 3 * n * 8 {
        return Err(bad(format!("expected {} payload bytes, found {}", 3 * n * 8, payload.len())));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let word_pos: u128 = header.rng_word_pos.parse().map_err(|e| bad(format!("rng position: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(header.seed);
    rng.set_word_pos(word_pos);
    Ok(TrainState {
        step: header.step,
        params: floats[..n].to_vec(),
        adam: AdamState { m: floats[n..2 * n].to_vec(), v: floats[2 * n..].to_vec(), step: header.adam_step },
        seed: header.seed,
        rng,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub checkpoints: Vec<PathBuf>,
    pub log: TrainLog,
}

/// Samples K completions for one task and scores each with the gated reward.
///
/// Completions that fail a gate stay in the group with reward 0.
pub fn rollout(
    task: &TaskSpec,
    policy: &dyn Policy,
    params: &[f64],
    seeds: &[u64],
    settings: &TrainSettings,
    judge: &dyn ConsistencyJudge,
    generator_calls: &AtomicUsize,
) -> Result<RolloutGroup, TrainError> {
    let completions = seeds
        .par_iter()
        .map(|&seed| {
            generator_calls.fetch_add(1, Ordering::Relaxed);
            let c = policy.sample(params, &task.prompt, settings.trainer.temperature, seed)?;
            let text = policy.decode(&c.tokens);
            let reward = compute_reward(&RawTrajectory(text.clone()), task, &settings.format, judge)?;
            Ok(RolloutCompletion { tokens: c.tokens, sampling_logprobs: c.logprobs, text, reward })
        })
        .collect::<Result<Vec<_>, TrainError>>()?;
    let mut group = RolloutGroup {
        task_id: task.id.clone(),
        prompt: task.prompt.clone(),
        completions,
        advantages: Vec::new(),
    };
    group.assign_advantages(&settings.loss);
    Ok(group)
}

pub struct Trainer<'a> {
    pub settings: TrainSettings,
    pub policy: &'a dyn Policy,
    pub judge: Box<dyn ConsistencyJudge + 'a>,
    pub sft_data: &'a [SftExample],
    pub rl_prompts: &'a [TaskSpec],
    /// Checkpoints and the train log go here; `None` keeps everything in memory.
    pub out_dir: Option<PathBuf>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        settings: TrainSettings,
        policy: &'a dyn Policy,
        judge: &'a dyn ConsistencyJudge,
        sft_data: &'a [SftExample],
        rl_prompts: &'a [TaskSpec],
        out_dir: Option<PathBuf>,
    ) -> Self {
        let judge: Box<dyn ConsistencyJudge + 'a> = if settings.trainer.judge_cache {
            Box::new(CachedJudge::new(judge))
        } else {
            Box::new(judge)
        };
        Self { settings, policy, judge, sft_data, rl_prompts, out_dir }
    }

    fn check(&self) -> Result<(), TrainError> {
        if self.sft_data.is_empty() {
            return Err(TrainError::DatasetEmpty("sft"));
        }
        if self.rl_prompts.is_empty() {
            return Err(TrainError::DatasetEmpty("rl"));
        }
        let s = &self.settings;
        s.trainer
            .check()
            .and(s.schedule.check())
            .and(s.loss.check())
            .and(s.optimizer.check())
            .and(s.format.check())
            .map_err(TrainError::Config)
    }

    pub fn initial_state(&self) -> TrainState {
        TrainState::new(vec![0.0; self.policy.num_params()], self.settings.trainer.seed)
    }

    /// Runs from scratch: checkpoint at step 0, then `total_steps` updates.
    pub fn run(&self) -> Result<TrainOutcome, TrainError> {
        self.run_from(self.initial_state())
    }

    /// Continues from a checkpoint file up to `total_steps`.
    pub fn resume(&self, checkpoint: &Path) -> Result<TrainOutcome, TrainError> {
        let state = read_checkpoint(checkpoint)?;
        if state.params.len() != self.policy.num_params() {
            return Err(TrainError::CheckpointRead {
                path: checkpoint.to_path_buf(),
                reason: format!("{} params, policy expects {}", state.params.len(), self.policy.num_params()),
            });
        }
        self.run_from(state)
    }

    pub fn run_from(&self, mut state: TrainState) -> Result<TrainOutcome, TrainError> {
        self.check()?;
        let mut checkpoints = Vec::new();
        let mut log = TrainLog::default();
        let every = self.settings.trainer.checkpoint_every;
        if let Some(dir) = &self.out_dir {
            if state.step == 0 {
                checkpoints.push(write_checkpoint(dir, &state)?);
            }
        }
        while state.step < self.settings.trainer.total_steps {
            let record = self.step(&mut state)?;
            log.records.push(record);
            if let Some(dir) = &self.out_dir {
                if state.step % every == 0 {
                    checkpoints.push(write_checkpoint(dir, &state)?);
                }
            }
        }
        if let Some(dir) = &self.out_dir {
            let path = dir.join(LOG_FILE);
            fs::write(&path, log.to_jsonl())
                .map_err(|source| TrainError::CheckpointWriteFailure { path, source })?;
        }
        Ok(TrainOutcome { params: state.params, checkpoints, log })
    }

    /// One full iteration; advances `state.step` by one.
    pub fn step(&self, state: &mut TrainState) -> Result<StepRecord, TrainError> {
        let s = &self.settings;
        let t = state.step + 1;

        let sft_batch: Vec<SftExample> = (0..s.trainer.sft_batch)
            .map(|_| self.sft_data[state.rng.gen_range(0..self.sft_data.len())].clone())
            .collect();
        let prompts: Vec<&TaskSpec> = (0..s.trainer.rl_prompts_per_step)
            .map(|_| &self.rl_prompts[state.rng.gen_range(0..self.rl_prompts.len())])
            .collect();
        let seeds: Vec<Vec<u64>> = prompts
            .iter()
            .map(|_| (0..s.trainer.rollout_k).map(|_| state.rng.gen()).collect())
            .collect();

        // The rollout snapshot is the current parameter vector; it is frozen for this step.
        let calls = AtomicUsize::new(0);
        let groups = prompts
            .iter()
            .zip(&seeds)
            .map(|(task, seeds)| rollout(task, self.policy, &state.params, seeds, s, self.judge.as_ref(), &calls))
            .collect::<Result<Vec<_>, _>>()?;

        let sft = sft_phi_loss(&sft_batch, self.policy, &state.params, &s.loss)?;
        let grpo = grpo_loss(&groups, self.policy, &state.params, &s.loss)?;
        let total = total_loss_grad(&sft, &grpo, t, &s.schedule)?;
        adam_step(&mut state.params, &total.grad, &mut state.adam, &s.optimizer)?;
        state.step = t;

        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards()).collect();
        Ok(StepRecord {
            step: t,
            mu: mu(t, &s.schedule).map_err(OptimError::from)?,
            sft_loss: sft.loss,
            grpo_loss: grpo.loss,
            total_loss: total.loss,
            mean_reward: rewards.iter().sum::<f64>() / rewards.len() as f64,
            b_rl: grpo.tokens,
            rl_completions: rewards.len(),
            generator_calls: calls.load(Ordering::Relaxed),
        })
    }
}
