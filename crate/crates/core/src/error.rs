use std::path::PathBuf;

use otg_diff::DiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("conjugate gradient did not converge: {0}")]
    Convergence(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

impl Error {
    /// Short machine-readable category used by the CLI.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::Integrity(_) => "integrity",
            Error::Io { .. } => "io",
            Error::Config(_) => "config",
            Error::Convergence(_) => "convergence",
            Error::Invalid(_) => "invalid",
            Error::Diff(_) => "numeric",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
