//! Crate-wide error type and result alias.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration, architecture, or operation parameters.
    #[error("configuration error: {0}")]
    Config(String),

    /// Mismatch between model, architecture, and batch shapes.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values encountered during training; the run is aborted.
    #[error("numeric fault at round {round}: {detail}")]
    NumericFault { round: usize, detail: String },

    /// Malformed external data file.
    #[error("ingestion error in {}: {detail}", path.display())]
    Ingestion { path: PathBuf, detail: String },

    /// Data partitioning could not satisfy its constraints.
    #[error("partition error: {0}")]
    Partition(String),

    /// Inputs violate an operation's contract.
    #[error("input error: {0}")]
    Input(String),

    /// A self-check oracle did not pass.
    #[error("oracle failure: {0}")]
    OracleFailure(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
