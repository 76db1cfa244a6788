use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("label {label} at batch index {index} is out of range for {classes} classes")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        classes: usize,
    },

    #[error("empty sequence: statistics pooling needs at least one frame")]
    EmptySequence,

    #[error("invalid model config: {0}")]
    Config(String),

    #[error("exit {exit} is not in the exit set {exits:?}")]
    InvalidExit { exit: usize, exits: Vec<usize> },

    #[error("no head for exit {exit}, task {task}")]
    MissingHead { exit: usize, task: usize },

    #[error("layer {layer}: {detail}")]
    LayerShape { layer: String, detail: String },

    #[error("decode error at byte {offset}: {detail}")]
    Decode { offset: usize, detail: String },

    #[error("task generation failed: {0}")]
    Generation(String),

    #[error("partition error: {0}")]
    Partition(String),

    #[error("client {client} cannot fit any exit within {budget_mb:.2} MB")]
    Infeasible { client: u32, budget_mb: f64 },

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("aggregation: layer {layer} from client {client}: {detail}")]
    Aggregation {
        layer: usize,
        client: u32,
        detail: String,
    },

    #[error("scenario config error at `{path}` (line {line}, column {column}): {detail}")]
    Scenario {
        path: String,
        line: usize,
        column: usize,
        detail: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn decode(offset: usize, detail: impl Into<String>) -> Self {
        Error::Decode {
            offset,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Broad failure class, used for process exit codes.
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Scenario { .. } | Error::Config(_) | Error::InvalidExit { .. } => {
                ErrorCategory::Config
            }
            Error::Io { .. } => ErrorCategory::Io,
            Error::Decode { .. } => ErrorCategory::Decode,
            Error::Protocol(_) | Error::Aggregation { .. } => ErrorCategory::Protocol,
            _ => ErrorCategory::Runtime,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Io,
    Decode,
    Protocol,
    Runtime,
}

impl ErrorCategory {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorCategory::Config => 2,
            ErrorCategory::Io => 3,
            ErrorCategory::Decode => 4,
            ErrorCategory::Protocol => 5,
            ErrorCategory::Runtime => 6,
        }
    }
}
