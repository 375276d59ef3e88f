use std::path::PathBuf;

use synthaudit_nn::NnError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("{file}: row {row}: {message}")]
    Manifest {
        file: PathBuf,
        row: usize,
        message: String,
    },

    #[error("cannot decode image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("report conflict: {0}")]
    Conflict(String),

    #[error("schema version mismatch: {found} vs {expected}")]
    Schema { found: String, expected: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Nn(NnError),

    #[error("serialization: {0}")]
    Serde(String),
}

impl From<NnError> for Error {
    fn from(e: NnError) -> Self {
        match e {
            NnError::NonFinite { what } => Error::Divergence(format!("non-finite {what}")),
            other => Error::Nn(other),
        }
    }
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Divergence(_) => 3,
            Error::Conflict(_) | Error::Schema { .. } => 4,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
