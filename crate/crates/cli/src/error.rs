use std::path::PathBuf;

use generalist_core::config::ConfigError;
use generalist_core::regret::RegretError;
use generalist_core::{CheckpointError, DataError, EvalError, TrainError};
use thiserror::Error;

/// Process exit codes.
pub mod exit {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 2;
    pub const DATA: i32 = 3;
    pub const NUMERIC: i32 = 4;
    pub const CHECKPOINT: i32 = 5;
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("training failed: {0}")]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
    #[error("evaluation failed: {0}")]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Regret(#[from] RegretError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("writing {path}: {message}")]
    Output { path: PathBuf, message: String },
    /// Some sweep cells failed; the code of the first failure is kept.
    #[error("{failed} of {total} sweep cells failed")]
    Sweep { failed: usize, total: usize, code: i32 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => exit::CONFIG,
            CliError::Data(_) => exit::DATA,
            CliError::Train(e) if e.is_numeric() => exit::NUMERIC,
            CliError::Train(TrainError::InvalidConfig(_) | TrainError::Model(_)) => exit::CONFIG,
            CliError::Checkpoint(_) | CliError::Mismatch(_) => exit::CHECKPOINT,
            CliError::Regret(RegretError::InvalidSetting(_) | RegretError::InvalidFamily(_)) => exit::CONFIG,
            CliError::Regret(RegretError::NonFiniteLoss { .. }) => exit::NUMERIC,
            CliError::Sweep { code, .. } => *code,
            _ => exit::OTHER,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        CliError::Output {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
