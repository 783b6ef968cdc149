use thiserror::Error;

/// Crate-wide error type. Variants map onto the CLI exit codes:
/// config 2, I/O 3, data integrity 4, numeric failure 5.
#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("{file}: format version mismatch (found {found}, expected {expected})")]
    VersionMismatch {
        file: String,
        found: u32,
        expected: u32,
    },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("integrity hash mismatch: {0}")]
    HashMismatch(String),

    #[error("shape mismatch for '{name}': expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
    pub fn corrupt(msg: impl Into<String>) -> Self {
        Error::Corrupt(msg.into())
    }
    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    /// Process exit code for this error kind.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 2,
            Error::Io(_) => 3,
            Error::VersionMismatch { .. }
            | Error::Corrupt(_)
            | Error::HashMismatch(_)
            | Error::ShapeMismatch { .. } => 4,
            Error::Numeric(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
