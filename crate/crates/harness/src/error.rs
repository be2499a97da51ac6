use std::io;
use std::path::Path;

use layerdyn::data::IdxError;
use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_IO: i32 = 4;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),

    /// Partial artifacts have already been written when this is returned.
    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("i/o error: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },

    #[error("chart rendering failed for {path}: {reason}")]
    Chart { path: String, reason: String },

    #[error(transparent)]
    Core(layerdyn::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => EXIT_CONFIG,
            HarnessError::Divergence(_) => EXIT_DIVERGENCE,
            HarnessError::Io { .. } | HarnessError::Chart { .. } => EXIT_IO,
            HarnessError::Core(layerdyn::Error::Idx(_)) => EXIT_IO,
            HarnessError::Core(_) => EXIT_CONFIG,
        }
    }

    pub fn io(context: impl AsRef<Path>, source: io::Error) -> Self {
        HarnessError::Io {
            context: context.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<layerdyn::Error> for HarnessError {
    fn from(e: layerdyn::Error) -> Self {
        match e {
            layerdyn::Error::Divergence { .. } => HarnessError::Divergence(e.to_string()),
            layerdyn::Error::Idx(IdxError::Io { path, source }) => HarnessError::Io {
                context: path.display().to_string(),
                source,
            },
            other => HarnessError::Core(other),
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl From<layerdyn::linalg::LinalgError> for HarnessError {
    fn from(e: layerdyn::linalg::LinalgError) -> Self {
        HarnessError::Core(e.into())
    }
}
