//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at node {node}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        node: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("output of node {node} is not a scalar (shape {shape:?})")]
    NonScalarOutput { node: String, shape: Vec<usize> },

    #[error("missing input `{name}` in parameter set")]
    MissingInput { name: String },

    #[error("invalid argument for {what}: {message}")]
    InvalidArgument { what: String, message: String },

    #[error("unknown config key `{key}`")]
    UnknownConfigKey { key: String },

    #[error("config key `{key}`: {message} (allowed: {allowed})")]
    ConfigRange {
        key: String,
        message: String,
        allowed: String,
    },

    #[error("config parse error at line {line}: {message}")]
    ConfigParse { line: usize, message: String },

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: String, expected: String },

    #[error("missing prerequisite stage `{stage}`: expected checkpoint at {path}")]
    MissingStage { stage: String, path: String },

    #[error("non-finite {loss} loss at iteration {iter}: training aborted")]
    NonFiniteLoss { loss: String, iter: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(what: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidArgument {
            what: what.into(),
            message: message.into(),
        }
    }
}
