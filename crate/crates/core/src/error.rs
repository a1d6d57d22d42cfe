use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the registration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed metadata in {path}: {message}")]
    Metadata { path: PathBuf, message: String },

    #[error("payload length mismatch: expected {expected} values for dims {dims:?}, found {found}")]
    LengthMismatch { expected: usize, found: usize, dims: [usize; 3] },

    #[error("non-finite value {value} at voxel index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("non-finite loss term `{term}`{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NonFiniteLoss { term: String, step: Option<u64> },

    #[error("non-finite parameter `{name}` after step {step}")]
    NonFiniteParameter { name: String, step: u64 },

    #[error("ground-truth deformation folded after {0} attempts")]
    GenerationFailed(usize),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
