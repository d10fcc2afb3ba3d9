//! Batch experiment runner for the `recurx` binary.

pub mod config;
pub mod run;

pub use config::{parse_config, parse_config_str, ConfigError, ExperimentConfig, ExperimentKind};
pub use run::{rereport, run, RunError, RunOptions, RunOutput};
