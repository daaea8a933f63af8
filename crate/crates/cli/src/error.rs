use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// A check ran and did not pass.
    #[error("{0}")]
    Check(String),

    #[error(transparent)]
    Config(lion_core::Error),

    #[error("cannot read {}: {source}", path.display())]
    Missing { path: PathBuf, source: lion_core::Error },

    #[error(transparent)]
    Core(lion_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Check(_) | CliError::Core(_) => 1,
            CliError::Config(_) => 2,
            CliError::Missing { .. } => 3,
        }
    }

    pub fn missing(path: impl Into<PathBuf>) -> impl FnOnce(lion_core::Error) -> Self {
        let path = path.into();
        move |source| CliError::Missing { path, source }
    }
}

impl From<lion_core::Error> for CliError {
    fn from(e: lion_core::Error) -> Self {
        match e {
            lion_core::Error::Config { .. } => CliError::Config(e),
            other => CliError::Core(other),
        }
    }
}
