use std::io;

use thiserror::Error;

/// Every fallible operation in the crate returns this error.
#[derive(Debug, Error)]
pub enum FameError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("config error at line {line}: {message}")]
    ConfigLine { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("training error: {0}")]
    Training(String),

    #[error("gradient oracle error: {0}")]
    Oracle(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T, E = FameError> = std::result::Result<T, E>;

impl FameError {
    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        FameError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            FameError::Config(_) | FameError::ConfigLine { .. } => 2,
            FameError::Data(_)
            | FameError::Sampling(_)
            | FameError::Format(_)
            | FameError::Io { .. }
            | FameError::Dimension(_)
            | FameError::Contract(_) => 3,
            FameError::NonFinite(_) | FameError::Training(_) | FameError::Oracle(_) => 4,
        }
    }
}

macro_rules! dim_err {
    ($($arg:tt)*) => { $crate::error::FameError::Dimension(format!($($arg)*)) };
}

macro_rules! contract_err {
    ($($arg:tt)*) => { $crate::error::FameError::Contract(format!($($arg)*)) };
}

pub(crate) use contract_err;
pub(crate) use dim_err;
