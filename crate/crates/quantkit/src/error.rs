//! Crate-wide error type.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("header parse error: {0}")]
    Header(#[from] serde_json::Error),

    #[error("bad magic: expected QMC1, found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("truncated: {0}")]
    Truncated(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing tensor {0}")]
    MissingTensor(String),

    #[error("duplicate tensor {0}")]
    DuplicateTensor(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("code out of range: {0} (must be 0..=15)")]
    CodeOutOfRange(u32),

    #[error("missing stats for {0}")]
    MissingStats(String),

    #[error("invalid argument: {0}")]
    InvalidArg(String),
}

pub type Result<T> = std::result::Result<T, Error>;
