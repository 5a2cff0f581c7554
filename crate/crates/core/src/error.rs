//! Error type shared by all simulator modules.

use std::path::PathBuf;

/// Errors produced by the simulator library.
#[derive(Debug, thiserror::Error)]
pub enum SimError {
    /// A structural problem with the requested setup: mismatched dimensions,
    /// aggregator parameters inconsistent with the cohort size, bad config
    /// keys or values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data that cannot be operated on (empty dataset, too few samples).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Malformed IDX payload; names the offending file and byte offset.
    #[error("IDX format error in {path} at offset {offset}: {message}")]
    IdxFormat {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    /// Dirichlet partitioning kept producing empty clients past the retry
    /// bound; signals that alpha, the client count, and the dataset size are
    /// mutually infeasible.
    #[error(
        "partition infeasible: {retries} redraws with alpha={alpha}, n_clients={n_clients} \
         all left some client empty"
    )]
    PartitionInfeasible {
        alpha: f64,
        n_clients: usize,
        retries: usize,
    },

    /// I/O failure, surfaced with the path involved.
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl SimError {
    /// Wraps an I/O error with the path it occurred on.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }
}
