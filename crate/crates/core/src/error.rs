use std::io;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// The variants map onto the process exit codes used by the CLI:
/// configuration problems, data or file-format problems, and numerical
/// failures are kept apart so callers can react differently.
#[derive(Debug, Error)]
pub enum Error {
    /// Bad argument passed to an operation (shape mismatch, out-of-bounds voxel, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// Inconsistent or out-of-range configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed file contents. `offset` is the byte position where parsing failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// NaN/Inf encountered during an optimization or training step.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// API misuse, such as differentiating a non-scalar root.
    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for this error class: 2 config, 3 data/format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Usage(_) => 2,
            Error::Input(_) | Error::Format { .. } | Error::Io(_) => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
