use std::path::{Path, PathBuf};

use thiserror::Error;

/// Failure of a command, carrying the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    /// Bad config, unparsable input or missing file (exit 2).
    #[error("{0}")]
    Input(String),
    /// Registration cannot be carried out on the given clouds (exit 3).
    #[error("registration infeasible: {0}")]
    Infeasible(String),
    /// More than half of the scans failed to register (exit 4).
    #[error("sequence failed: {0}")]
    SequenceFailed(String),
    /// Writing results failed (exit 1).
    #[error("cannot write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Output { .. } => 1,
            CliError::Input(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::SequenceFailed(_) => 4,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    /// Input error prefixed with the offending path.
    pub fn at(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Input(format!("{}: {err}", path.display()))
    }
}
