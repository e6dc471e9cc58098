use std::path::PathBuf;

use thiserror::Error;

use crate::trace::Phase;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by a denoiser implementation.
#[derive(Debug, Error)]
pub enum DenoiseError {
    #[error("frame index {frame_index} has no target (sequence holds {available} frames)")]
    FrameIndex { frame_index: usize, available: usize },
    #[error("denoiser input has {got} frames, capability is {max}")]
    TooWide { got: usize, max: usize },
    #[error("latent length {got} does not match l*d = {expected}")]
    Shape { got: usize, expected: usize },
    #[error("external denoiser: {0}")]
    External(#[source] Box<dyn std::error::Error + Send + Sync>),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("timestep ordering violated: {0}")]
    Ordering(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("denoiser failed during {phase} iteration {iteration}")]
    Denoiser {
        phase: Phase,
        iteration: usize,
        #[source]
        source: DenoiseError,
    },
    #[error("malformed latent file at byte offset {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("trace integrity: {0}")]
    Integrity(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("stream: {0}")]
    Stream(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
