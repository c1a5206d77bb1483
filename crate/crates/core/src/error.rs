use thiserror::Error;

/// Errors produced by the cost models, planner and simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("element count overflow for {0}")]
    Overflow(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("missing profile entry: {0}")]
    MissingProfile(String),
    #[error("sequence length {seq_len} exceeds the largest NPU standard length {max}; requires decomposition or padding")]
    RequiresDecomposition { seq_len: u64, max: u64 },
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error("duplicate profile key: {0}")]
    DuplicateKey(String),
    #[error("plan does not match model: {0}")]
    PlanMismatch(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
