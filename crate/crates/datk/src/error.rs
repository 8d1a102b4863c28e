use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller asked for something structurally impossible (bad shape, unknown
    /// bank, width mismatch, invalid configuration value).
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation precondition was violated (bad argument range, missing
    /// gradient, non-scalar loss).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Numerics went bad: non-finite values, excessive imaginary residue,
    /// diverging optimization.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// A file did not match its on-disk format (magic, version, checksum,
    /// record sizes).
    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code for the CLI: validation-style failures exit 1,
    /// I/O failures exit 2.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 2,
            Error::Format { .. } => 2,
            _ => 1,
        }
    }
}
