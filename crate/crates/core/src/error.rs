//! Crate-wide error type.
//!
//! Variants map onto the CLI exit-code contract: config errors exit 2, data
//! errors exit 3, numerical failures exit 4.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad dimensions, unknown keys, incompatible specs.
    #[error("config error: {0}")]
    Config(String),

    /// Data problems: missing files, malformed containers, shape mismatches
    /// between paired inputs.
    #[error("data error: {0}")]
    Data(String),

    /// Numerical failure: NaN/Inf where finite values are required, degenerate
    /// geometry, non-converging state.
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for this error class (0 is success, 1 generic).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}
