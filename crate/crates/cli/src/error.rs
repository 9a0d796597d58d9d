use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("manifest: {0}")]
    Schema(String),
    #[error("resource guardrail: {0}")]
    Guardrail(String),
    #[error("numerical abort: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Schema(_) => 2,
            CliError::Guardrail(_) => 3,
            CliError::Numerical(_) => 4,
            CliError::Io(_) => 5,
        })
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

/// Solver errors abort the run numerically unless they come from a bad input.
pub fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}
