use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("codec error: {0}")]
    Codec(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("validation error in tensor `{tensor}`: {reason}")]
    Validation { tensor: String, reason: String },

    #[error("model spec error: {0}")]
    Spec(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("capacity error: {0}")]
    Capacity(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("token error: id {0} is outside the vocabulary")]
    Token(u32),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error: {0}")]
    Config(String),

    /// Generation was stopped at a token boundary by its observer.
    #[error("generation aborted: {0}")]
    Aborted(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn validation(tensor: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            tensor: tensor.into(),
            reason: reason.into(),
        }
    }
}
