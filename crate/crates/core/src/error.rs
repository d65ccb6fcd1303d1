use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration value. `key` names the offending field.
    #[error("{key}: {message}")]
    Config { key: String, message: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    Dimension { expected: usize, actual: usize },

    #[error("simulation fault: {0}")]
    Simulation(String),

    #[error("training error: {0}")]
    Training(String),

    /// The back buffer cannot yet supply a batch of the requested size.
    #[error("replay buffer not ready: {available} of {requested} samples")]
    NotReady { available: usize, requested: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("episode is done; call reset")]
    EpisodeDone,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}
