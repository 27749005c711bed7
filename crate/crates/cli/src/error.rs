use std::path::PathBuf;

use ipfsim_core::metrics::MetricsError;
use ipfsim_core::sim::SimError;
use ipfsim_core::trace::{SpecError, StatsError, TraceError};
use thiserror::Error;

/// Process exit codes. Usage errors (2) are produced by the argument parser.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const IO: i32 = 4;
    pub const TRACE: i32 = 5;
    pub const SPEC: i32 = 6;
    pub const SIMULATION: i32 = 7;
    pub const MISMATCH: i32 = 8;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Trace { path: PathBuf, source: TraceError },
    #[error("trace statistics: {0}")]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Spec(#[from] SpecError),
    #[error("simulation: {0}")]
    Sim(#[from] SimError),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("compare: {0}")]
    Mismatch(String),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => exit::CONFIG,
            CliError::Io { .. } => exit::IO,
            CliError::Trace {
                source: TraceError::Io(_),
                ..
            } => exit::IO,
            CliError::Trace { .. } | CliError::Stats(_) => exit::TRACE,
            CliError::Spec(_) => exit::SPEC,
            // configuration problems caught by the simulator's own checks
            CliError::Sim(SimError::Invariant { .. }) => exit::SIMULATION,
            CliError::Sim(_) => exit::CONFIG,
            CliError::Metrics(MetricsError::MismatchedTraces { .. }) => exit::MISMATCH,
            CliError::Metrics(_) => exit::CONFIG,
            CliError::Mismatch(_) => exit::MISMATCH,
        }
    }
}
