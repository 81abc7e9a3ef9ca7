//! Configuration, on-disk formats and the `simulate`, `run`, `evaluate` and
//! `experiment` commands.

mod commands;
pub mod config;
pub mod formats;

pub use commands::{
    cmd_evaluate, cmd_experiment, cmd_run, cmd_simulate, run_dataset, ExperimentSummary, ModeOutcome, RunOptions,
    RunOutcome, SeedOutcome, BASELINE_METHOD, NORMAL_METHOD,
};
pub use config::RunConfig;

use std::path::Path;

use thiserror::Error;

use crate::estimator::EstimatorError;
use crate::evaluation::EvaluationError;
use crate::simulator::SimulationError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("output directory {0} is not empty; pass --force to overwrite")]
    OutputExists(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error(transparent)]
    Simulation(#[from] SimulationError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), message: e.to_string() }
    }

    /// 1 for usage and configuration errors, 2 for data errors, 3 for
    /// estimator failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::OutputExists(_) => 1,
            CliError::Io { .. }
            | CliError::Parse { .. }
            | CliError::Data(_)
            | CliError::Evaluation(_)
            | CliError::Simulation(_) => 2,
            CliError::Estimator(_) => 3,
        }
    }
}
