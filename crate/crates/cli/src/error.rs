use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing {path}; produce it with `ssfo {producer}`")]
    MissingPrerequisite { path: PathBuf, producer: &'static str },
    #[error("{path}:{line}: {message}")]
    Schema { path: PathBuf, line: usize, message: String },
    #[error("{path}: {message}")]
    Corrupt { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] ssfo_core::Error),
}

impl CliError {
    /// 2 for filesystem problems, 1 for everything that failed validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } | CliError::MissingPrerequisite { .. } => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
