//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not satisfy an op's contract.
    #[error("{op}: {details}")]
    Shape { op: &'static str, details: String },

    /// An op precondition other than shape was violated.
    #[error("{op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("embedding id {id} out of range for table with {vocab} rows")]
    IdOutOfRange { id: usize, vocab: usize },

    #[error("softmax row {row} has no unmasked entries")]
    FullyMaskedRow { row: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("ROI {roi_id} contains no tumor nuclei")]
    EmptyBag { roi_id: String },

    #[error("gradient for parameter {name} is not finite")]
    NanGradient { name: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("image: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl From<image::ImageError> for Error {
    fn from(e: image::ImageError) -> Self {
        Error::Image(e.to_string())
    }
}
