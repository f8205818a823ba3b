use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = IdianError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum IdianError {
    /// Inconsistent dimensions, invalid hyperparameters, impossible sampling requests.
    #[error("configuration error: {0}")]
    Config(String),

    /// Operation invoked in a state that does not allow it.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl IdianError {
    pub fn config(msg: impl Into<String>) -> Self {
        IdianError::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        IdianError::Usage(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        IdianError::Numeric(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IdianError::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            IdianError::Config(_) | IdianError::Usage(_) => 2,
            IdianError::Parse { .. } | IdianError::Data(_) | IdianError::Io { .. } => 3,
            IdianError::Numeric(_) => 4,
        }
    }
}
