use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the library.
///
/// The variants line up with the process exit codes used by the command line
/// front-end: configuration problems, precondition violations at run time,
/// parse failures and numerical failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("model selection failed: {0}")]
    Selection(String),

    #[error("fit diverged after {iterations} iterations (last nll {last_nll})")]
    FitDiverged {
        iterations: usize,
        last_nll: f64,
        trace: Vec<f64>,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
