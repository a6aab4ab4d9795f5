use std::fmt;

use ndtensor::TensorError;
use senticomp::encoder::EncoderError;
use senticomp::evalsuite::EvalError;
use senticomp::objective::ObjectiveError;
use senticomp::treebank::TreebankError;

/// Process exit codes.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NON_FINITE: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: message.into(),
        }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_CHECKPOINT,
            message: message.into(),
        }
    }

    pub fn other(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_OTHER,
            message: message.into(),
        }
    }

    /// Prefix the message with what was being done.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Checkpoint(_) | TensorError::CheckpointShape { .. } | TensorError::CheckpointTruncated { .. } => {
                CliError::checkpoint(e.to_string())
            }
            _ => CliError::other(e.to_string()),
        }
    }
}

impl From<TreebankError> for CliError {
    fn from(e: TreebankError) -> Self {
        match e {
            TreebankError::Io(_) => CliError::other(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<EncoderError> for CliError {
    fn from(e: EncoderError) -> Self {
        match e {
            EncoderError::Tensor(t) => t.into(),
            EncoderError::Io(_) => CliError::other(e.to_string()),
            _ => CliError::config(e.to_string()),
        }
    }
}

impl From<ObjectiveError> for CliError {
    fn from(e: ObjectiveError) -> Self {
        match e {
            ObjectiveError::NonFinite { .. } => CliError {
                code: EXIT_NON_FINITE,
                message: e.to_string(),
            },
            ObjectiveError::Tensor(t) => t.into(),
            ObjectiveError::Encoder(x) => x.into(),
            ObjectiveError::Treebank(x) => x.into(),
            ObjectiveError::Config(_) | ObjectiveError::Composition(_) => CliError::config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Treebank(x) => x.into(),
            EvalError::Coverage { .. } | EvalError::Mismatch(_) => CliError::config(e.to_string()),
            _ => CliError::other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::other(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::other(e.to_string())
    }
}
