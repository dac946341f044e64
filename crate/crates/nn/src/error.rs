use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("attention query row {0} has no attendable key")]
    EmptyMaskRow(usize),
    #[error("input too short: {got} frames, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("id {id} out of range for table of {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("loss is not finite: {0}")]
    NonFinite(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = NnError> = std::result::Result<T, E>;
