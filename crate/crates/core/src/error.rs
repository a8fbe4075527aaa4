use thiserror::Error;

pub type Result<T> = std::result::Result<T, DnrError>;

#[derive(Debug, Error)]
pub enum DnrError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("rejected action: close {close}, open {open} is not a feasible branch exchange")]
    RejectedAction { close: usize, open: usize },

    #[error("power flow did not converge after {iterations} iterations (last voltage change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },

    #[error("ingestion error: {0}")]
    Ingestion(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("checkpoint format error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
