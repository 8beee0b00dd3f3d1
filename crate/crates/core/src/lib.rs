//! E-ConvNeXt construction kit: dense CPU kernels, an architecture builder for
//! the ConvNeXt/CSP family, an analytic cost model, verification oracles and a
//! small trainer.

pub mod arch;
pub mod attention;
pub mod cost;
pub mod error;
pub mod etf;
pub mod net;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Dims, Tensor};

/// Environment variable capping the worker threads used by the kernels.
pub const THREADS_ENV: &str = "ECONVNEXT_THREADS";

/// Sizes the global thread pool from `ECONVNEXT_THREADS` when set. Returns the
/// configured count, or `None` when the variable is absent.
pub fn configure_threads() -> Result<Option<usize>> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(Some(n))
}
