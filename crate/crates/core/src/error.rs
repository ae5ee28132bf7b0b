//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

use crate::losses::LossBreakdown;

pub type Result<T> = std::result::Result<T, GateError>;

#[derive(Debug, Error)]
pub enum GateError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("node {0} is not recorded on this tape")]
    NotOnTape(usize),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("unknown task `{0}`")]
    UnknownTask(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("transfer from `{0}` to itself is not allowed")]
    SelfTransfer(String),

    #[error("no transfer ratio for pair {from} -> {to}")]
    MissingRatio { from: String, to: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite training loss ({breakdown:?})")]
    NonFiniteLoss { breakdown: LossBreakdown },

    #[error("training diverged at epoch {epoch} (l_tot = {loss})")]
    Divergence { epoch: usize, loss: f64 },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint was written for a different config")]
    ConfigHashMismatch,

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },

    #[error("json error in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

impl GateError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        GateError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        GateError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    /// Process exit code used by the CLI.
    pub fn exit_code(&self) -> i32 {
        match self {
            GateError::Config { .. } => 2,
            GateError::Divergence { .. } | GateError::NonFiniteLoss { .. } => 3,
            GateError::Io { .. }
            | GateError::Csv { .. }
            | GateError::Json { .. }
            | GateError::Parse { .. }
            | GateError::CheckpointVersion { .. }
            | GateError::CorruptCheckpoint(_)
            | GateError::ConfigHashMismatch => 4,
            _ => 1,
        }
    }
}
