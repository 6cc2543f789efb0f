use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("decode error: {0}")]
    Decode(String),

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// External embedding file lacks rows for some windows.
    #[error("embedding join failed, missing window ids: {}", .0.join(", "))]
    MissingIds(Vec<String>),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("stage `{stage}` depends on `{missing}`, which is missing or out of date")]
    Dependency { stage: String, missing: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("recordings missing from ground truth: {}", .0.join(", "))]
    MissingTruth(Vec<String>),

    #[error("refusing to initialise non-empty project directory {}", .0.display())]
    NotEmpty(PathBuf),

    #[error("no cluster has been labelled yet")]
    NoLabels,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
