use thiserror::Error;

/// Errors raised by the numerical core, the fusion stack and the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("patch size {patch} does not divide image {height}x{width} (remainders {rem_h}, {rem_w})")]
    NotDivisible {
        height: usize,
        width: usize,
        patch: usize,
        rem_h: usize,
        rem_w: usize,
    },

    #[error("coordinate ({row}, {col}) lies outside the {rows}x{cols} grid")]
    OffGrid {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("unknown word {0:?}")]
    UnknownWord(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("image format: {0}")]
    ImageFormat(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("manifest line {line}: {detail}")]
    Manifest { line: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
