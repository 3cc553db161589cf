use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("stage contract violated: {0}")]
    StageContract(String),
    #[error("tokenizer hash mismatch: expected {expected}, got {got}")]
    TokenizerHashMismatch { expected: String, got: String },
    #[error("unknown word in prompt: {0:?}")]
    UnknownWord(String),
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
