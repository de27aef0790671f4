//! CLI error type and its mapping to exit statuses.

use thiserror::Error;

/// Failures surfaced by the command-line harness.
#[derive(Debug, Error)]
pub enum CliError {
    /// The configuration is malformed or inconsistent (exit status 2).
    #[error("config error: {0}")]
    Config(String),
    /// A numerical routine left its admissible domain (exit status 1).
    #[error("{context}: {source}")]
    Domain {
        /// Which analysis step failed.
        context: String,
        /// The underlying numerical error.
        #[source]
        source: rkbsnet_core::Error,
    },
    /// Writing the report failed (exit status 1).
    #[error("output error: {0}")]
    Output(String),
}

impl CliError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Domain { .. } | CliError::Output(_) => 1,
        }
    }
}

/// Attaches analysis context to core errors.
pub trait Context<T> {
    /// Wraps a core error with a description of the failing step.
    fn context(self, what: &str) -> Result<T, CliError>;
}

impl<T> Context<T> for Result<T, rkbsnet_core::Error> {
    fn context(self, what: &str) -> Result<T, CliError> {
        self.map_err(|source| CliError::Domain { context: what.to_string(), source })
    }
}
