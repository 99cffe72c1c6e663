//! Losses, advantages and the Adam update.
//!
//! * `sft_phi_loss`: token-weighted NLL, `−(1/Σ|y*|) Σ φ(p_t) log p_t`.
//! * `grpo_loss`: clipped surrogate averaged over every RL token in the batch.
//! * `total_loss`: `(1 − μ(t))·grpo + μ(t)·sft`.
//!
//! All losses return their gradient w.r.t. the flat parameter vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::{Policy, PolicyError};
use crate::reward::RewardBreakdown;
use crate::schedule::{mu, token_weight, ScheduleConfig, ScheduleError};

/// Upper bound on `log π − log π_sample` before exponentiation.
pub const MAX_LOG_RATIO: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OptimError {
    #[error("empty SFT batch")]
    EmptyBatch,
    #[error("SFT example {0} has an empty target")]
    EmptyTarget(usize),
    #[error("completion {completion} of group {group}: {tokens} tokens but {logprobs} log-probs")]
    TokenAlignmentMismatch { group: usize, completion: usize, tokens: usize, logprobs: usize },
    #[error("group {group}: {completions} completions but {advantages} advantages")]
    MissingAdvantages { group: usize, completions: usize, advantages: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// How φ(p) enters the SFT gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiGradient {
    /// φ is a constant weight; gradient flows only through `log p`.
    #[default]
    StopGradient,
    /// Differentiate through φ(p) as well.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub clip_epsilon: f64,
    pub ez: f64,
    pub phi_gradient: PhiGradient,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { clip_epsilon: 0.2, ez: 1e-8, phi_gradient: PhiGradient::StopGradient }
    }
}

impl LossConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(format!("loss: clip_epsilon must be in (0,1), got {}", self.clip_epsilon));
        }
        if !(self.ez > 0.0) {
            return Err("loss: ez must be > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub learning_rate: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, learning_rate: 2e-6, adam_eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn check(&self) -> Result<(), String> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.beta1) || !unit(self.beta2) {
            return Err("optimizer: beta1 and beta2 must be in (0,1)".into());
        }
        if !(self.learning_rate > 0.0) || !(self.adam_eps > 0.0) {
            return Err("optimizer: learning_rate and adam_eps must be > 0".into());
        }
        Ok(())
    }
}

/// Scalar loss with its dense gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Number of tokens the loss was averaged over.
    pub tokens: usize,
}

impl LossGrad {
    fn zero(n: usize) -> Self {
        Self { loss: 0.0, grad: vec![0.0; n], tokens: 0 }
    }
}

/// `A_j = (r_j − mean) / (std + ez)` with the population standard deviation.
pub fn normalize_advantages(rewards: &[f64], cfg: &LossConfig) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    rewards.iter().map(|r| (r - mean) / (std + cfg.ez)).collect()
}

pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Per-token surrogate `min(r·A, clip(r, 1−ε, 1+ε)·A)` and whether the
/// unclipped branch carries the gradient.
pub fn surrogate(ratio: f64, advantage: f64, eps: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = clip(ratio, 1.0 - eps, 1.0 + eps) * advantage;
    if unclipped <= clipped {
        (unclipped, true)
    } else {
        (clipped, false)
    }
}

pub fn importance_ratio(logp: f64, logp_sample: f64) -> f64 {
    (logp - logp_sample).min(MAX_LOG_RATIO).exp()
}

/// One RL token as seen by the surrogate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurrogateToken {
    pub logp: f64,
    pub logp_sample: f64,
    pub advantage: f64,
}

/// Clipped-surrogate loss over a flat token list and `∂loss/∂logp` per token.
pub fn grpo_surrogate(tokens: &[SurrogateToken], cfg: &LossConfig) -> (f64, Vec<f64>) {
    if tokens.is_empty() {
        return (0.0, Vec::new());
    }
    let n = tokens.len() as f64;
    let mut total = 0.0;
    let mut dlogp = Vec::with_capacity(tokens.len());
    for t in tokens {
        let ratio = importance_ratio(t.logp, t.logp_sample);
        let (value, active) = surrogate(ratio, t.advantage, cfg.clip_epsilon);
        total += value;
        let capped = t.logp - t.logp_sample >= MAX_LOG_RATIO;
        dlogp.push(if active && !capped { -t.advantage * ratio / n } else { 0.0 });
    }
    (-total / n, dlogp)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutCompletion {
    pub tokens: Vec<usize>,
    /// Log-probs under the distribution the tokens were sampled from.
    pub sampling_logprobs: Vec<f64>,
    pub text: String,
    pub reward: RewardBreakdown,
}

/// K completions for one prompt sharing one advantage normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task_id: String,
    pub prompt: String,
    pub completions: Vec<RolloutCompletion>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn rewards(&self) -> Vec<f64> {
        self.completions.iter().map(|c| c.reward.reward).collect()
    }

    pub fn assign_advantages(&mut self, cfg: &LossConfig) {
        self.advantages = normalize_advantages(&self.rewards(), cfg);
    }

    pub fn token_count(&self) -> usize {
        self.completions.iter().map(|c| c.tokens.len()).sum()
    }
}

/// GRPO loss over a batch of groups at `params`.
pub fn grpo_loss(
    groups: &[RolloutGroup],
    policy: &dyn Policy,
    params: &[f64],
    cfg: &LossConfig,
) -> Result<LossGrad, OptimError> {
    let mut flat = Vec::new();
    let mut grads = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        if g.advantages.len() != g.completions.len() {
            return Err(OptimError::MissingAdvantages {
                group: gi,
                completions: g.completions.len(),
                advantages: g.advantages.len(),
            });
        }
        for (ci, (c, &adv)) in g.completions.iter().zip(&g.advantages).enumerate() {
            if c.tokens.len() != c.sampling_logprobs.len() {
                return Err(OptimError::TokenAlignmentMismatch {
                    group: gi,
                    completion: ci,
                    tokens: c.tokens.len(),
                    logprobs: c.sampling_logprobs.len(),
                });
            }
            for pos in 0..c.tokens.len() {
                let lp = policy.log_prob(params, &g.prompt, &c.tokens, pos)?;
                flat.push(SurrogateToken { logp: lp.logp, logp_sample: c.sampling_logprobs[pos], advantage: adv });
                grads.push(lp.grad);
            }
        }
    }
    let mut out = LossGrad::zero(policy.num_params());
    let (loss, dlogp) = grpo_surrogate(&flat, cfg);
    out.loss = loss;
    out.tokens = flat.len();
    for (coef, g) in dlogp.iter().zip(&grads) {
        if *coef != 0.0 {
            for &(i, v) in g {
                out.grad[i] += coef * v;
            }
        }
    }
    Ok(out)
}

/// An expert demonstration as token ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftExample {
    pub prompt: String,
    pub target: Vec<usize>,
}

pub fn sft_phi_loss(
    batch: &[SftExample],
    policy: &dyn Policy,
    params: &[f64],
    cfg: &LossConfig,
) -> Result<LossGrad, OptimError> {
    if batch.is_empty() {
        return Err(OptimError::EmptyBatch);
    }
    if let Some(i) = batch.iter().position(|e| e.target.is_empty()) {
        return Err(OptimError::EmptyTarget(i));
    }
    let n: usize = batch.iter().map(|e| e.target.len()).sum();
    let scale = 1.0 / n as f64;
    let mut out = LossGrad::zero(policy.num_params());
    out.tokens = n;
    for ex in batch {
        for pos in 0..ex.target.len() {
            let lp = policy.log_prob(params, &ex.prompt, &ex.target, pos)?;
            let p = lp.logp.exp().clamp(0.0, 1.0);
            let phi = token_weight(p)?;
            out.loss -= scale * phi * lp.logp;
            let dphi_dlogp = match cfg.phi_gradient {
                PhiGradient::StopGradient => 0.0,
                PhiGradient::Full => (1.0 - 2.0 * p) * p,
            };
            let coef = -scale * (phi + dphi_dlogp * lp.logp);
            for (i, v) in lp.grad {
                out.grad[i] += coef * v;
            }
        }
    }
    Ok(out)
}

pub fn total_loss(sft: f64, grpo: f64, t: u64, cfg: &ScheduleConfig) -> Result<f64, ScheduleError> {
    let m = mu(t, cfg)?;
    Ok((1.0 - m) * grpo + m * sft)
}

/// Mixes the two losses and their gradients with weight μ(t).
pub fn total_loss_grad(sft: &LossGrad, grpo: &LossGrad, t: u64, cfg: &ScheduleConfig) -> Result<LossGrad, OptimError> {
    if sft.grad.len() != grpo.grad.len() {
        return Err(OptimError::ShapeMismatch(format!(
            "sft gradient has {} entries, grpo {}",
            sft.grad.len(),
            grpo.grad.len()
        )));
    }
    let m = mu(t, cfg)?;
    Ok(LossGrad {
        loss: (1.0 - m) * grpo.loss + m * sft.loss,
        grad: sft.grad.iter().zip(&grpo.grad).map(|(s, g)| (1.0 - m) * g + m * s).collect(),
        tokens: sft.tokens + grpo.tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &OptimizerConfig,
) -> Result<(), OptimError> {
    let n = params.len();
    if grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(OptimError::ShapeMismatch(format!(
            "params {n}, grads {}, m {}, v {}",
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..n {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
