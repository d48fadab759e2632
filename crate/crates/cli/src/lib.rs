//! Operator surface for the extraction harness: configuration loading,
//! experiment orchestration and report rendering.
//!
//! The binary in `main.rs` is a thin clap layer over these functions, so
//! every subcommand can also be driven from tests with mock services.

pub mod commands;
pub mod config;
pub mod experiment;

use thiserror::Error;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, run_experiment_with, RunSummary, Services};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("interrupted: {0}")]
    Interrupted(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("report schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("{0}")]
    Failed(String),
}

impl RunError {
    /// 2 for problems the operator must fix before rerunning, else 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::ConfigInvalid(_) | RunError::Auth(_) => 2,
            _ => 1,
        }
    }
}
