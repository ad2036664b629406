use thiserror::Error;

/// Errors produced by the cache, analysis and merge routines.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("position {got} does not follow last stored position {last}")]
    NonMonotonicPosition { last: usize, got: usize },

    #[error("attention over an empty cache")]
    EmptyCache,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("index {index} out of range for {what} (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("length mismatch for {what}: expected {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("layer {layer} head {head} has zero total attention")]
    ZeroTotalAttention { layer: usize, head: usize },

    #[error("proxy count {proxies} must be in 1..{len}")]
    ProxyCountTooLarge { proxies: usize, len: usize },

    #[error("zero-norm vector has no cosine similarity")]
    ZeroNormVector,

    #[error("invalid attention snapshot: {0}")]
    InvalidSnapshot(String),

    #[error("invalid model dimensions: {0}")]
    InvalidDims(String),

    #[error("prompt contains no tokens")]
    EmptyPrompt,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid merge plan: {0}")]
    InvalidPlan(String),
}

pub type Result<T> = std::result::Result<T, Error>;
