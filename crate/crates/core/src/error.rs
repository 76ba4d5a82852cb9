use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AlgmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AlgmError {
    /// Operand shapes are incompatible.
    #[error("shape error: {0}")]
    Shape(String),

    /// An operation was called on input that violates its precondition.
    #[error("precondition violated: {0}")]
    Precondition(String),

    /// A merge record does not describe a valid original→current mapping.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Weights(#[from] WeightError),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl AlgmError {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        AlgmError::Config { path: path.into(), message: message.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        AlgmError::Io { path: path.into(), source }
    }
}

/// Failures while reading or validating a TMW1 weight file.
#[derive(Debug, Error)]
pub enum WeightError {
    #[error("bad magic bytes {found:02x?}, expected \"TMW1\"")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported weight file version {0}")]
    UnsupportedVersion(u32),

    #[error("weight file truncated while reading {context}")]
    Truncated { context: String },

    #[error("tensor name is not valid UTF-8")]
    BadName,

    #[error("duplicate tensor `{0}`")]
    Duplicate(String),

    #[error("tensor `{tensor}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { tensor: String, expected: Vec<usize>, found: Vec<usize> },

    #[error("tensor `{0}` is missing")]
    MissingTensor(String),

    #[error("unexpected tensor `{0}` for this configuration")]
    UnexpectedTensor(String),

    #[error("tensor `{0}` contains non-finite values")]
    NonFinite(String),
}

impl WeightError {
    /// Name of the tensor the error refers to, if any.
    pub fn tensor(&self) -> Option<&str> {
        match self {
            WeightError::ShapeMismatch { tensor, .. } => Some(tensor),
            WeightError::MissingTensor(t)
            | WeightError::UnexpectedTensor(t)
            | WeightError::Duplicate(t)
            | WeightError::NonFinite(t) => Some(t),
            _ => None,
        }
    }
}
