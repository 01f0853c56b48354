use std::path::PathBuf;

use crate::config::{ExpertId, ValidationReport};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(ValidationReport),

    #[error("need at least {needed} experts per layer for top-{k} routing, got {experts}")]
    BetaUndefined { k: usize, experts: usize, needed: usize },

    #[error("score vector has length {got}, expected {expected}")]
    VectorLength { expected: usize, got: usize },

    #[error("no evictable expert in layer {layer}: every resident expert is shielded")]
    NoEvictable { layer: u32 },

    #[error("expert {0} is already resident")]
    AlreadyResident(ExpertId),

    #[error("brute-force balance supports at most {max} items, got {got}")]
    TooManyItems { max: usize, got: usize },

    #[error("trace {path}: line {line}: {field}: {message}")]
    TraceFormat {
        path: PathBuf,
        line: usize,
        field: String,
        message: String,
    },

    #[error("reuse curve needs >=2 iterations, trace has {0}")]
    NeedsTwoIterations(usize),

    #[error("shape mismatch: trace is {trace}, config is {config}")]
    ShapeMismatch { trace: String, config: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
