use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: {msg}", path.display())]
    Config { path: PathBuf, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Unreadable or incompatible checkpoint.
    #[error("checkpoint version error: {}: {msg}", path.display())]
    Version { path: PathBuf, msg: String },
    #[error("{}: {msg}", path.display())]
    Data { path: PathBuf, msg: String },
    #[error(transparent)]
    Core(#[from] spformer_core::Error),
    #[error("{0}")]
    Check(String),
}

impl CliError {
    /// 1 for usage and configuration problems, 2 for everything that fails
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config { .. } => 1,
            _ => 2,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }

    pub(crate) fn data(path: impl Into<PathBuf>, msg: impl std::fmt::Display) -> CliError {
        CliError::Data {
            path: path.into(),
            msg: msg.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
