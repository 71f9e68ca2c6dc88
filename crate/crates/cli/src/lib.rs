//! Experiment runner over [`mmpda`]: TOML configs in, JSON reports,
//! checkpoints and sweep tables out.

pub mod commands;
pub mod config;
pub mod error;
pub mod log;

pub use config::{DomainEntry, ExperimentConfig, SweepConfig, SweepPreset};
pub use error::{CliError, CliResult};
