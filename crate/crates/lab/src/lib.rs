//! Configuration-driven experiments for the filtering laboratory: each run executes one recipe,
//! writes deterministic CSV tables with a summary document, and reports pass/fail against the
//! tolerances recorded in the config.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod report;

use std::path::Path;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

pub use config::{ExperimentConfig, ExperimentKind};
pub use error::{LabError, Result};
pub use report::{Check, Report, Table};

/// Process exit codes.
pub const EXIT_PASS: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_TOLERANCE: u8 = 2;

/// Execute the experiment on a dedicated pool of `threads` workers (all cores when `None`).
pub fn run(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Report> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| LabError::Output(format!("thread pool: {e}")))?;
    pool.install(|| experiments::execute(cfg))
}

/// Execute and write the tables, `summary.json` and `run_meta.json` into `out`.
pub fn run_to_dir(cfg: &ExperimentConfig, out: &Path, threads: Option<usize>) -> Result<Report> {
    let started = SystemTime::now();
    let clock = Instant::now();
    let report = run(cfg, threads)?;
    let unix = |t: SystemTime| t.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let meta = serde_json::json!({
        "started_unix_s": unix(started),
        "elapsed_s": clock.elapsed().as_secs_f64(),
        "threads": threads.unwrap_or_else(rayon::current_num_threads),
        "version": env!("CARGO_PKG_VERSION"),
    });
    report.write(cfg, out, &meta)?;
    Ok(report)
}
