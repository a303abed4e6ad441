//! Failure classes and their process exit codes.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Exit 2: the checkpoint is missing, unreadable or inconsistent.
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// Exit 3: an image, manifest, mask or flag is missing or unusable.
    #[error("input: {0}")]
    Input(String),
    /// Exit 4: the caption cannot be used as asked.
    #[error("caption: {0}")]
    Caption(String),
    /// Exit 1: anything else, including numeric failures during training.
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Checkpoint(_) => 2,
            CliError::Input(_) => 3,
            CliError::Caption(_) => 4,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Attaches an error class to library errors.
pub trait Classify<T> {
    fn checkpoint(self) -> CliResult<T>;
    fn input(self) -> CliResult<T>;
    fn other(self) -> CliResult<T>;
}

impl<T, E: std::fmt::Display> Classify<T> for Result<T, E> {
    fn checkpoint(self) -> CliResult<T> {
        self.map_err(|e| CliError::Checkpoint(e.to_string()))
    }
    fn input(self) -> CliResult<T> {
        self.map_err(|e| CliError::Input(e.to_string()))
    }
    fn other(self) -> CliResult<T> {
        self.map_err(|e| CliError::Other(e.to_string()))
    }
}
