//! Batch front end for OMLA experiments: TOML configs, binary checkpoints
//! and episode files, and CSV reports.

mod binio;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod episodes;
pub mod error;
pub mod pipeline;
pub mod records;
pub mod report;

pub use config::LabConfig;
pub use error::{LabError, Result};

/// Environment variable capping rollout parallelism.
pub const THREADS_ENV: &str = "OMLA_LAB_THREADS";

/// Sizes the global rayon pool from [`THREADS_ENV`] when it is set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| LabError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| LabError::Config(format!("thread pool: {e}")))
}
