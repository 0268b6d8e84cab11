//! Experiment drivers behind the `scheduler` command-line tool.

pub mod artifacts;
pub mod config;
pub mod experiments;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    /// Process exit code: 2 for configuration errors, 3 for numerical
    /// failures, 1 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<datasched_core::Error> for CliError {
    fn from(e: datasched_core::Error) -> Self {
        use datasched_core::Error as E;
        match e {
            E::NonConvergence { .. } | E::AssumptionViolated(_) | E::NotStochastic { .. } => {
                CliError::Numeric(e.to_string())
            }
            E::Io(io) => CliError::Io(io),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(e.into())
    }
}
