use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {what}: {message}")]
    Parse { what: String, message: String },

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("unknown layer kind `{0}`")]
    UnknownLayerKind(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("concept `{0}` not found")]
    UnknownConcept(String),

    #[error("sample `{0}` not found")]
    UnknownSample(String),

    #[error(
        "solver did not converge after {iterations} iterations \
         (primal residual {primal_residual:.3e}, dual residual {dual_residual:.3e})"
    )]
    NotConverged {
        iterations: usize,
        primal_residual: f64,
        dual_residual: f64,
    },
}

impl ChainError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ChainError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(what: impl Into<String>, message: impl ToString) -> Self {
        ChainError::Parse {
            what: what.into(),
            message: message.to_string(),
        }
    }
}

pub type Result<T, E = ChainError> = std::result::Result<T, E>;
