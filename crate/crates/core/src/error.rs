use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("{context}: {dim} not divisible by {by}; crop the input first")]
    NotDivisible {
        context: String,
        dim: usize,
        by: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("loss must be a scalar (shape 1x1x1x1), found {0}")]
    NonScalarLoss(String),

    #[error("mask is not binary: entry {value} at flat index {index}")]
    NonBinaryMask { index: usize, value: f64 },

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("parameter `{name}` already exists with shape {existing}, requested {requested}")]
    ParamShape {
        name: String,
        existing: String,
        requested: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("image error: {0}")]
    Image(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
