//! Error type shared across the numeric core.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, naming both sides.
    #[error("shape mismatch: {context}: {left:?} vs {right:?}")]
    ShapeMismatch {
        context: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An operation precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Model/dataset configuration is inconsistent.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data (annotations, splits, ...).
    #[error("validation error: {0}")]
    Validation(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
