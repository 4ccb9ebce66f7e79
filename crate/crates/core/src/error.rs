use std::io;

use thiserror::Error;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("non-finite gradient at step {step} in tensor `{tensor}`")]
    NonFiniteGradient { step: u64, tensor: String },

    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: u64 },

    #[error("range error: {0}")]
    Range(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("estimation error: {0}")]
    Estimation(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
