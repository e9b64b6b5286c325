use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid OTFS configuration: {0}")]
    Config(String),

    #[error("invalid symbol pattern: {0}")]
    InvalidPattern(String),

    #[error("framing error: {0}")]
    Framing(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("path sampling error: {0}")]
    Sampling(String),

    #[error("index {index} out of range 1..={max}")]
    OutOfRange { index: usize, max: usize },

    #[error("calibration skipped: {0}")]
    CalibrationSkipped(String),

    #[error("oracle refused instance: {0}")]
    OracleRefused(String),

    #[error("experiment config error at `{field}`: {reason}")]
    ExperimentConfig { field: String, reason: String },

    #[error("no result rows to emit")]
    EmptyResult,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
