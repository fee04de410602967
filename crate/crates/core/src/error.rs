use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument violated an operation's precondition (shape, range, sign).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("KL divergence undefined: predicted[{index}] is 0 where target is {target}")]
    DivergenceUndefined { index: usize, target: f64 },

    #[error("empty sequence: {0}")]
    EmptySequence(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("invalid joint topology: {0}")]
    Topology(String),

    #[error("cannot split dataset: {0}")]
    Split(String),

    #[error("token vector of length {len} exceeds unified length {max}")]
    Overflow { len: usize, max: usize },

    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    #[error("request to {endpoint} timed out after {attempts} attempt(s)")]
    Timeout { endpoint: String, attempts: u32 },

    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },

    #[error("remote returned HTTP {status}: {body}")]
    Status { status: u16, body: String },

    #[error("response schema mismatch: {0}")]
    Schema(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
