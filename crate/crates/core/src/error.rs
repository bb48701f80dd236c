use std::path::PathBuf;

use crate::scene::AgentId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("insufficient history for agent {agent}: have {have} states, need {need}")]
    InsufficientHistory { agent: AgentId, have: usize, need: usize },

    #[error("duplicate agent id {0}")]
    DuplicateAgent(AgentId),

    #[error("agent {0} is not part of the scene")]
    UnknownAgent(AgentId),

    #[error("tracks share no common frame")]
    NoCommonFrame,

    #[error("invalid track for agent {agent}: {reason}")]
    InvalidTrack { agent: AgentId, reason: String },

    #[error("invalid prediction: {0}")]
    InvalidPrediction(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-positive sigma at step {step}; gaussian parameters must pass through the output transform")]
    NonPositiveSigma { step: usize },

    #[error("class index {index} out of range for {classes} classes")]
    ClassOutOfRange { index: usize, classes: usize },

    #[error("pooling window {window:?} larger than input {input:?}")]
    WindowTooLarge { window: (usize, usize), input: (usize, usize) },

    #[error("horizon mismatch: expected {expected} steps, got {got}")]
    HorizonMismatch { expected: usize, got: usize },

    #[error("agent {agent} has no policy for level {level}")]
    MissingLevel { agent: AgentId, level: usize },

    #[error("invalid reasoning assignment: {0}")]
    InvalidAssignment(String),

    #[error("policy failed for agent {agent} at level {level}: {source}")]
    Policy {
        agent: AgentId,
        level: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("missing parameters: {0}")]
    MissingParameters(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: frame {frame} for vehicle {vehicle} does not increase")]
    NonMonotoneFrames { vehicle: AgentId, frame: i64, line: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("unknown reference column {0:?}")]
    UnknownReference(String),

    #[error("sample rate mismatch: dataset {dataset} Hz, config {config} Hz")]
    RateMismatch { dataset: f64, config: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("format: {0}")]
    Format(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
