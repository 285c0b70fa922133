//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch, left {left:?} vs right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: axis {axis} invalid for shape {shape:?}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: index {index} out of bounds for length {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{context}: non-finite value encountered")]
    NonFinite { context: String },

    #[error("vocabulary construction requires a non-empty caption corpus")]
    EmptyCorpus,

    #[error("token id {id} outside the fixed vocabulary (size {fixed_size})")]
    TokenOutOfRange { id: usize, fixed_size: usize },

    #[error("image {image_id}: {reason}")]
    BadBundle { image_id: String, reason: String },

    #[error("duplicate image id {image_id}")]
    DuplicateImage { image_id: String },

    #[error("no copy channel: image has no OCR tokens mapped into the extended vocabulary")]
    NoCopyChannel,

    #[error("p_gen {value} outside the open interval (0,1)")]
    PgenOutOfRange { value: f64 },

    #[error("sequence length mismatch: {left} distributions vs {right} targets")]
    LengthMismatch { left: usize, right: usize },

    #[error("training aborted: non-finite loss on batch {batch}")]
    NanAbort { batch: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("vocabulary hash mismatch: checkpoint {expected}, supplied {actual}")]
    VocabHashMismatch { expected: String, actual: String },

    #[error("malformed input: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
