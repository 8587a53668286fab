use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("propagation requires at least one local item")]
    EmptyLocalGraph,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient for client {client} in round {round} ({what})")]
    NonFinite {
        client: usize,
        round: u64,
        what: &'static str,
    },
    #[error("invalid config: {key}: {constraint}")]
    Config { key: String, constraint: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
