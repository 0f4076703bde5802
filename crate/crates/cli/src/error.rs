use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot {action} {}: {source}", path.display())]
    Io {
        action: &'static str,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: byte {offset}: {msg}", path.display())]
    Bytes { path: PathBuf, offset: u64, msg: String },

    #[error("{}: line {line}: {msg}", path.display())]
    Line { path: PathBuf, line: u64, msg: String },

    #[error("config {}: {msg}", path.display())]
    ConfigFile { path: PathBuf, msg: String },

    #[error("checkpoint {}: {msg}", path.display())]
    Checkpoint { path: PathBuf, msg: String },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Core(#[from] efqat_core::Error),
}

impl CliError {
    pub fn io(action: &'static str, path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { action, path, source }
    }

    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Core(efqat_core::Error::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
