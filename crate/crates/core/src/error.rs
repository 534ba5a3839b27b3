use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpimError {
    #[error("invalid instance: {0}")]
    InvalidInstance(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("schedule step {step} outside 0..={total}")]
    Schedule { step: usize, total: usize },
    #[error("geometry: {0}")]
    Geometry(String),
    #[error("not supported: {0}")]
    NotSupported(String),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("initial state: {0}")]
    Init(String),
    #[error("instance of {n} numbers exceeds exhaustive limit of {limit}")]
    TooLarge { n: usize, limit: usize },
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SpimError>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(SpimError::Dimension { expected, got })
    }
}
