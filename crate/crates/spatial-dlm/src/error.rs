//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by model construction, inference and I/O.
#[derive(Debug, Error)]
pub enum Error {
    /// Input files or configuration could not be parsed.
    #[error("parse error: {0}")]
    Parse(String),

    /// Inputs parsed but violate one or more model invariants.
    /// Every detected violation is listed, not just the first.
    #[error("validation failed:\n{}", .0.join("\n"))]
    Validation(Vec<String>),

    /// A numerical operation failed (singular factorization, overflow,
    /// non-finite likelihood).
    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Single-message validation error.
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(vec![msg.into()])
    }

    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}
