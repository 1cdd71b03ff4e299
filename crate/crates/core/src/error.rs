use std::path::PathBuf;

use numcore::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed {what}: {detail}")]
    Format {
        path: PathBuf,
        what: &'static str,
        detail: String,
    },
    #[error("{path}: hash mismatch for {what} (manifest {expected}, computed {found})")]
    Corrupt {
        path: PathBuf,
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("checkpoint v{version}: parameter {name} has shape {found:?}, model expects {expected:?}")]
    CheckpointMismatch {
        version: u32,
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite {term} loss at step {step}")]
    NonFinite { step: usize, term: &'static str },
    #[error("vtc: sample {index} has a zero-norm {which} embedding")]
    ZeroNorm { index: usize, which: &'static str },
    #[error("{0}")]
    Contract(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
