use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("config error: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("missing input {path}: {hint}")]
    MissingInput { path: PathBuf, hint: String },

    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("content hash mismatch: header {expected}, computed {computed}")]
    HashMismatch { expected: String, computed: String },

    #[error("unsupported format version {found} (this build reads {supported})")]
    VersionSkew { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
