use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Kind};

pub const MANIFEST_FILE: &str = "manifest.json";

/// Across-trial statistics of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryStat {
    pub metric: String,
    pub trials: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single trial.
    pub sd: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub kind: Kind,
    pub config_hash: String,
    pub master_seed: u64,
    pub trial_seeds: Vec<u64>,
    /// The fully defaulted configuration that was run.
    pub config: ExperimentConfig,
    /// Every file in the output directory, this one included, sorted.
    pub artifacts: Vec<String>,
    pub summary: Vec<SummaryStat>,
}

/// Mean ± 1.96·sd/√n of `values`.
pub fn summarize(metric: &str, values: &[f64]) -> SummaryStat {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
    } else {
        0.0
    };
    let half = 1.96 * sd / (n as f64).sqrt();
    SummaryStat {
        metric: metric.to_string(),
        trials: n,
        mean,
        sd,
        ci_low: mean - half,
        ci_high: mean + half,
    }
}
