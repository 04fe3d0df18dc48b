use thiserror::Error;

/// Errors produced by the numerical routines in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rank {rank} out of range for mode {mode} (allowed 1..={max})")]
    RankOutOfRange { mode: usize, rank: usize, max: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("matrix is numerically singular ({0})")]
    Singular(String),

    #[error("row {row}: {what} density must be positive, got {value}")]
    NonPositiveDensity { row: usize, what: &'static str, value: f64 },

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
