use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AplError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("oracle unavailable: {0}")]
    OracleUnavailable(String),

    #[error("could not parse judge response: {message}\n--- raw response ---\n{raw}")]
    ParseFailure { message: String, raw: String },

    #[error("cancelled: {0}")]
    Cancelled(String),

    #[error("integrity error in {}: {message}", path.display())]
    Integrity { path: PathBuf, message: String },

    #[error("incompatible format version in {}: found {found}, expected {expected}", path.display())]
    Incompatible {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("run already finished after {0} steps")]
    RunFinished(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl AplError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        AplError::InvalidInput(msg.into())
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        AplError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, AplError>;
