use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("degenerate encoding: {0}")]
    Degenerate(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("corpus validation failed: {0}")]
    Corpus(String),

    #[error("config errors: {}", .0.join("; "))]
    Config(Vec<String>),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("training diverged at step {step}: {message}")]
    Diverged { step: u64, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl Error {
    /// Stable short name of the variant, for machine-readable reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite(_) => "non-finite",
            Error::Invalid(_) => "invalid",
            Error::Degenerate(_) => "degenerate",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Corpus(_) => "corpus",
            Error::Config(_) => "config",
            Error::Version { .. } => "version",
            Error::Diverged { .. } => "diverged",
        }
    }
}
