use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: dtype mismatch")]
    DType { op: &'static str },

    #[error("{op}: non-finite value produced")]
    NonFinite { op: &'static str },

    #[error("{op}: index {index} out of range (len {len})")]
    Index {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
