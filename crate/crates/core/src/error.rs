use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("empty memory bank: {0}")]
    EmptyBank(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("validation error in field `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn validation(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
