use std::io;

use gwshm_core::error::Error as CoreError;

/// Failures surfaced by the command-line layer, each tied to a stable exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("{context}: {source}")]
    Runtime { context: String, source: CoreError },
    #[error("{context}: {source}")]
    Io { context: String, source: io::Error },
    #[error("{0}")]
    Format(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Scenario(_) => 3,
            CliError::Runtime { .. } | CliError::Io { .. } | CliError::Format(_) => 4,
        }
    }

    pub fn io(context: impl Into<String>, source: io::Error) -> Self {
        CliError::Io { context: context.into(), source }
    }
}

pub trait Context<T> {
    fn context(self, what: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, CoreError> {
    fn context(self, what: &str) -> Result<T, CliError> {
        self.map_err(|source| match source {
            CoreError::Validation(_) => CliError::Scenario(format!("{what}: {source}")),
            source => CliError::Runtime { context: what.to_string(), source },
        })
    }
}

pub type CliResult<T> = Result<T, CliError>;
