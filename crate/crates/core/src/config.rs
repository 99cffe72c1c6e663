//! Engine configuration file: every module's settings in one TOML document.
//!
//! ```toml
//! [format]
//! min_think_tokens = 10
//! max_think_tokens = 2048
//!
//! [schedule]
//! mu_peak = 0.5
//! mu_valley = 0.02
//! t_warmup = 200
//! t_decay = 400
//!
//! [gateway]
//! base_url = "http://127.0.0.1:8000"
//! timeout_ms = 60000
//! ```
//!
//! Missing sections and keys take their defaults; unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::FormatConfig;
use crate::gateway::GatewaySettings;
use crate::optim::{LossConfig, OptimizerConfig};
use crate::rtg::SearchConfig;
use crate::schedule::ScheduleConfig;
use crate::trainer::{TrainSettings, TrainerConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parsing config: {0}")]
    Parse(String),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub format: FormatConfig,
    pub schedule: ScheduleConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub trainer: TrainerConfig,
    pub search: SearchConfig,
    pub gateway: GatewaySettings,
}

impl EngineConfig {
    pub fn from_toml(src: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(src).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_toml(&src)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("engine config serializes")
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.format.check().map_err(ConfigError::Invalid)?;
        self.schedule.check().map_err(ConfigError::Invalid)?;
        self.loss.check().map_err(ConfigError::Invalid)?;
        self.optimizer.check().map_err(ConfigError::Invalid)?;
        self.trainer.check().map_err(ConfigError::Invalid)?;
        self.search.check().map_err(ConfigError::Invalid)?;
        self.gateway.check().map_err(ConfigError::Invalid)
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            trainer: self.trainer.clone(),
            schedule: self.schedule,
            loss: self.loss,
            optimizer: self.optimizer,
            format: self.format.clone(),
        }
    }
}
