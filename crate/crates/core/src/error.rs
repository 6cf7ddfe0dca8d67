use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes do not line up for the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller-side precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// A function under evaluation produced a non-finite value.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    /// The linear system behind a surrogate fit could not be solved.
    #[error("solver error: {0}")]
    Solver(String),

    #[error("failed to ingest {path}: {reason}")]
    Ingest { path: PathBuf, reason: String },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

/// Failures while reading a model checkpoint. Each corruption mode gets its
/// own variant so callers can tell them apart.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic: expected \"CXK1\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload while reading {0}")]
    Truncated(String),

    #[error("shape mismatch for tensor {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid config in checkpoint: {0}")]
    Config(String),

    #[error("invalid tensor name: {0}")]
    Name(String),
}
