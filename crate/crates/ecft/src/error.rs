use thiserror::Error;

#[derive(Debug, Error)]
pub enum EcftError {
    #[error("content vocabulary too small: {0} (minimum 8)")]
    VocabTooSmall(usize),
    #[error("unknown language id: {0}")]
    UnknownLanguage(String),
    #[error("token {0} is outside the expected inventory")]
    OutOfInventory(u32),
    #[error("token id {0} is out of the vocabulary range {1}")]
    OutOfVocabulary(u32, usize),
    #[error("requested {requested} records but the world only has {capacity} distinct attribute tuples")]
    WorldExhausted { requested: usize, capacity: usize },
    #[error("all token counts are zero")]
    AllZeroCounts,
    #[error("no tokens remain allowed after masking")]
    MaskExhausted,
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("candidate index {index} out of range for {count} candidates")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown pipeline arm: {0}")]
    UnknownArm(String),
    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EcftError>;
