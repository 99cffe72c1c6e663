//! Hybrid SFT/RL post-training engine for structured reasoning trajectories.
//!
//! The crate covers the structured `<think>`/`<answer>` grammar, the gated
//! composite reward, the SFT/RL mixing schedule, φ-weighted SFT and GRPO
//! losses with Adam, a desk-scale trainer over a tabular toy policy,
//! verifier-guided trajectory search, benchmark metrics and rater agreement,
//! and an OpenAI-compatible client for every external model role.

pub mod config;
pub mod eval;
pub mod format;
pub mod gateway;
pub mod optim;
pub mod policy;
pub mod prompts;
pub mod reward;
pub mod rtg;
pub mod schedule;
pub mod task;
pub mod synthetic;
pub mod trainer;
