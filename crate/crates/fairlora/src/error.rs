//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// An operation was called with arguments that violate its contract
    /// (dimension mismatch, non-scalar backward root, empty input, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid configuration (fractions not summing to one, bad split
    /// ratios, unknown mode, ...).
    #[error("config error: {0}")]
    Config(String),

    /// A line of an input file failed to parse.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// Records parsed but are mutually inconsistent.
    #[error("schema error: {0}")]
    Schema(String),

    /// A group present in a batch has no precomputed weight.
    #[error("no weight for group {0:?}")]
    MissingGroupWeight(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at optimizer step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    /// Asked to emit a table with no rows.
    #[error("result table is empty")]
    EmptyTable,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(String),

    #[error("toml error: {0}")]
    Toml(String),
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
