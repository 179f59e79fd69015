//! Error types shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("columns are not orthonormal: deviation {deviation:.3e} exceeds {limit:.3e}")]
    Orthonormality { deviation: f64, limit: f64 },

    #[error("probability row {row} does not sum to 1 (sum = {sum})")]
    Probability { row: usize, sum: f64 },

    #[error("degenerate spectrum: all eigenvalues are zero or negative")]
    DegenerateSpectrum,

    #[error("confident mask is empty")]
    EmptyMask,

    #[error("all prototypes are zero; contrastive loss is undefined")]
    Degenerate,

    #[error("invalid data: {0}")]
    Data(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("source dataset accessed after sealing (adaptation must be source-free)")]
    SourceSealed,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }
}
