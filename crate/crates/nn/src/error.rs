use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite {what} (training diverged)")]
    NonFinite { what: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("architecture mismatch at layer {index} ({layer}): {detail}")]
    ArchitectureMismatch {
        index: usize,
        layer: String,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;
