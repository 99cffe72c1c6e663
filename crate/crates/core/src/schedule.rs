//! Global SFT/RL mixing weight μ(t) and the token-wise weight φ(p) = p(1 − p).

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ScheduleError {
    #[error("step {0} is out of range (steps start at 1)")]
    InvalidStep(u64),
    #[error("probability {0} is outside [0, 1]")]
    DomainError(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub mu_peak: f64,
    pub mu_valley: f64,
    pub t_warmup: u64,
    pub t_decay: u64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { mu_peak: 0.5, mu_valley: 0.02, t_warmup: 200, t_decay: 400 }
    }
}

impl ScheduleConfig {
    pub fn check(&self) -> Result<(), String> {
        if !(0.0 <= self.mu_valley && self.mu_valley < self.mu_peak && self.mu_peak <= 1.0) {
            return Err(format!(
                "schedule: need 0 <= mu_valley < mu_peak <= 1, got {} and {}",
                self.mu_valley, self.mu_peak
            ));
        }
        if self.t_warmup == 0 || self.t_decay == 0 {
            return Err("schedule: t_warmup and t_decay must be >= 1".into());
        }
        Ok(())
    }
}

/// Warmup rises linearly from μ_valley to μ_peak over `t_warmup` steps, then
/// decays linearly back to μ_valley over `t_decay` steps and stays there.
pub fn mu(t: u64, cfg: &ScheduleConfig) -> Result<f64, ScheduleError> {
    if t < 1 {
        return Err(ScheduleError::InvalidStep(t));
    }
    let span = cfg.mu_peak - cfg.mu_valley;
    let value = if t <= cfg.t_warmup {
        cfg.mu_valley + span * (t as f64 / cfg.t_warmup as f64)
    } else if t <= cfg.t_warmup + cfg.t_decay {
        cfg.mu_peak - span * ((t - cfg.t_warmup) as f64 / cfg.t_decay as f64)
    } else {
        cfg.mu_valley
    };
    Ok(value)
}

pub fn token_weight(p: f64) -> Result<f64, ScheduleError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(ScheduleError::DomainError(p));
    }
    Ok(p * (1.0 - p))
}
