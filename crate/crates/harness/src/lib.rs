//! Experiment harness for flowkv: trace I/O, recipes, CSV reports and plots.

pub mod error;
pub mod experiments;
pub mod metrics;
pub mod plots;
pub mod report;
pub mod trace;

pub use error::{HarnessError, Result};

/// Environment variable capping rayon workers.
pub const THREADS_ENV: &str = "FLOWKV_THREADS";

/// Worker cap from the raw `FLOWKV_THREADS` value; `None` leaves rayon's
/// default. Zero and unparsable values are usage errors.
pub fn parse_thread_cap(raw: Option<&str>) -> Result<Option<usize>> {
    match raw.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(HarnessError::Usage(format!("{THREADS_ENV}={s:?} is not a positive integer"))),
        },
    }
}
