use std::io;

use crate::trace::TraceError;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Core(#[from] flowkv_core::Error),
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
    #[error("CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("plot: {0}")]
    Plot(String),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        use flowkv_core::Error as E;
        match self {
            HarnessError::Usage(_) | HarnessError::Core(E::InvalidConfig(_)) => EXIT_USAGE,
            HarnessError::Core(E::NonFinite(_) | E::ZeroTotalAttention { .. } | E::ZeroNormVector) => {
                EXIT_NUMERIC
            }
            _ => EXIT_INPUT,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
