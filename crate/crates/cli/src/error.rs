use std::fmt::Display;
use std::process::ExitCode;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or input data; exit status 1.
    #[error("{0}")]
    Validation(String),
    /// Failure while running a valid request; exit status 2.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Validation(_) => ExitCode::from(1),
            CliError::Runtime(_) => ExitCode::from(2),
        }
    }
}

pub trait Classify<T> {
    fn invalid(self, context: &str) -> Result<T, CliError>;
    fn failed(self, context: &str) -> Result<T, CliError>;
}

impl<T, E: Display> Classify<T> for Result<T, E> {
    fn invalid(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Validation(format!("{context}: {e}")))
    }

    fn failed(self, context: &str) -> Result<T, CliError> {
        self.map_err(|e| CliError::Runtime(format!("{context}: {e}")))
    }
}
