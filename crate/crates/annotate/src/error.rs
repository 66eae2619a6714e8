use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnnotateError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{backend} failed after {attempts} attempt(s): {detail}")]
    Backend {
        backend: String,
        attempts: u32,
        detail: String,
    },

    #[error("malformed backend output: {0}")]
    Malformed(String),

    #[error("missing field `{field}` in {context}")]
    MissingField { field: String, context: String },

    #[error("unknown rating {0:?} (expected Very Good, Good, Fair or Poor)")]
    UnknownRating(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, AnnotateError>;
