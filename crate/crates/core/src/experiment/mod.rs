//! Config-driven experiment runner.

mod config;
mod manifest;
mod runner;

pub use config::{
    parse_config, AlphaChoice, ConfigError, DataSection, ExperimentConfig, Kind, ModelSection, NormChoice,
    NormSection, OptimizerKind, PChoice, RenderSection, TrainSection,
};
pub use manifest::{summarize, Manifest, SummaryStat, MANIFEST_FILE};
pub use runner::{run, trial_seed};

use sha2::{Digest, Sha256};

/// First 16 hex digits of the SHA-256 of `text`.
pub fn digest(text: &str) -> String {
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Worker count: `LPNLAB_THREADS` if set and valid, else `requested`, else
/// the number of available cores.
pub fn resolve_jobs(requested: Option<usize>) -> usize {
    std::env::var("LPNLAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .or(requested.filter(|&n| n > 0))
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
