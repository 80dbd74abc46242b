//! Config-file loading and precedence. Every subcommand accepts
//! `--config <path>` in TOML or JSON with keys mirroring its flags;
//! explicit flags override file values, and `MEMSHARE_SEED` supplies the
//! default seed when neither provides one.

use std::fs;
use std::path::{Path, PathBuf};

use memshare_core::blockstore::CacheDims;
use memshare_core::schedsim::WorkloadConfig;
use memshare_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Deserialize;

pub fn load_file_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path)?;
    let by_ext = path.extension().and_then(|e| e.to_str());
    match by_ext {
        Some("json") => {
            serde_json::from_str(&text).map_err(|e| invalid(path, &e.to_string()))
        }
        Some("toml") => toml::from_str(&text).map_err(|e| invalid(path, &e.to_string())),
        _ => toml::from_str(&text)
            .or_else(|_| serde_json::from_str(&text))
            .map_err(|e| invalid(path, &e.to_string())),
    }
}

fn invalid(path: &Path, msg: &str) -> Error {
    Error::InvalidArgument(format!("config {}: {msg}", path.display()))
}

/// Seed from the environment, used when neither flag nor file provides one.
pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var("MEMSHARE_SEED") {
        Ok(text) => text
            .trim()
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::InvalidArgument(format!("MEMSHARE_SEED is not a u64: {text}"))),
        Err(_) => Ok(None),
    }
}

pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64> {
    Ok(flag.or(file).or(env_seed()?).unwrap_or(0))
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateFile {
    pub seed: Option<u64>,
    pub traces: Option<usize>,
    pub steps: Option<usize>,
    pub step_len_min: Option<usize>,
    pub step_len_max: Option<usize>,
    pub vocab_size: Option<u32>,
    pub redundancy: Option<f64>,
    pub mutation: Option<f64>,
    pub eta: Option<f64>,
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub embed_dim: Option<usize>,
    pub skip_kv: Option<bool>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyzeFile {
    pub seed: Option<u64>,
    pub trace: Option<PathBuf>,
    pub kv: Option<PathBuf>,
    pub thresholds: Option<Vec<f64>>,
    pub block_size: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdsFile {
    pub step_threshold: Option<f64>,
    /// Absent means: calibrate as a percentile of the all-pairs distances.
    pub block_distance_threshold: Option<f64>,
    pub top_k: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    pub seed: Option<u64>,
    pub seeds: Option<u64>,
    pub block_budget: Option<usize>,
    pub max_ticks: Option<u64>,
    pub evaluator_period: Option<u64>,
    pub dims: Option<CacheDims>,
    pub thresholds: Option<ThresholdsFile>,
    pub workload: Option<WorkloadConfig>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyBoundsFile {
    pub seed: Option<u64>,
    pub trials: Option<usize>,
    pub head_dims: Option<Vec<usize>>,
    pub t_values: Option<Vec<usize>>,
    pub epsilon_grid: Option<Vec<f64>>,
    pub delta_grid: Option<Vec<f64>>,
    pub out_dir: Option<PathBuf>,
}
