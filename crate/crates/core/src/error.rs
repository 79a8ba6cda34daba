use std::io;

use thiserror::Error;

/// Errors produced by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic: expected \"SHPK\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {found} (max supported {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    #[error(
        "truncated payload for tensor '{tensor}': declared {declared} bytes, {available} present"
    )]
    Truncated {
        tensor: String,
        declared: u64,
        available: u64,
    },

    #[error("non-finite value in float tensor '{tensor}' at flat index {index}")]
    NonFinite { tensor: String, index: usize },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("pack validation failed: {}", .0.join("; "))]
    Validation(Vec<String>),

    #[error("missing tensor '{0}'")]
    MissingTensor(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("fitting failed: {0}")]
    Fit(String),

    #[error("configuration error: {0}")]
    Config(String),
}

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad arguments or configuration supplied by the caller.
    User,
    /// Input data is malformed or violates an invariant.
    Data,
    /// Environment or unexpected failure.
    Internal,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => ErrorKind::User,
            Error::Io(e) if e.kind() == io::ErrorKind::NotFound => ErrorKind::User,
            Error::Io(_) => ErrorKind::Internal,
            _ => ErrorKind::Data,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
