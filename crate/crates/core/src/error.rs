//! Error type shared across the crate.
//!
//! Variants are grouped by how the CLI maps them to exit codes: data
//! problems (malformed files, impossible splits) exit 2, numeric
//! divergence exits 3, configuration problems exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or inconsistent input data.
    #[error("data: {0}")]
    Data(String),

    /// Invalid configuration or arguments.
    #[error("config: {0}")]
    Config(String),

    /// Matrix/operator shape disagreement.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Training produced a non-finite quantity.
    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn divergence(msg: impl Into<String>) -> Self {
        Error::Divergence(msg.into())
    }
}
