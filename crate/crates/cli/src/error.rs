use std::path::PathBuf;

use physmamba_core::Error;
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const VERIFICATION: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("{0}")]
    Usage(String),

    #[error("verification failed: {0}")]
    Verification(String),

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io { path: path.into(), source }
    }

    pub fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        CliError::Csv { path: path.into(), source }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Verification(_) => exit::VERIFICATION,
            CliError::Io { .. } | CliError::Csv { .. } => exit::IO,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::Argument(_)
                | Error::Dimension(_)
                | Error::Parameterization(_)
                | Error::Capacity(_)
                | Error::Mode(_) => exit::USAGE,
                Error::Io { .. } | Error::Format { .. } | Error::InsufficientData(_) => exit::IO,
                Error::NonFinite { .. }
                | Error::Numeric { .. }
                | Error::Graph(_)
                | Error::DegenerateReduction(_) => exit::VERIFICATION,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
