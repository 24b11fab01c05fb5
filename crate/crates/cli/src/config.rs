//! Resolved settings for each subcommand.
//!
//! Values come from built-in defaults, then an optional TOML file, then
//! command-line flags. The resolved struct is written next to the outputs so
//! a run can be repeated with `--config <snapshot>`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateSettings {
    pub mnist_dir: Option<PathBuf>,
    /// Seven-segment glyphs per class in place of MNIST.
    pub synthetic_per_class: Option<usize>,
    pub out: Option<PathBuf>,
    pub seed: u64,
    pub samples_per_base: usize,
    pub limit_bases: Option<usize>,
    pub disparity_far: u32,
    pub disparity_near: u32,
    pub shard_records: usize,
}

impl Default for GenerateSettings {
    fn default() -> Self {
        GenerateSettings {
            mnist_dir: None,
            synthetic_per_class: None,
            out: None,
            seed: 0,
            samples_per_base: 10,
            limit_bases: None,
            disparity_far: 2,
            disparity_near: 4,
            shard_records: 50_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub model: String,
    pub input_mode: String,
    pub filters: usize,
    pub tau: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
    pub limit: Option<usize>,
    pub resume: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            data: None,
            out: None,
            model: "BLT".into(),
            input_mode: "stereo".into(),
            filters: 32,
            tau: 4,
            epochs: 25,
            batch_size: 500,
            learning_rate: 0.003,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            holdout_fraction: 0.02,
            limit: None,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub name: Option<String>,
    pub split: String,
    pub batch_size: usize,
    pub limit: Option<usize>,
    pub dump: bool,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            checkpoint: None,
            data: None,
            out: None,
            name: None,
            split: "test".into(),
            batch_size: 500,
            limit: None,
            dump: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSettings {
    pub evals: Vec<PathBuf>,
    pub out: Option<PathBuf>,
    pub fdr: f64,
    pub exact_small: bool,
}

impl Default for CompareSettings {
    fn default() -> Self {
        CompareSettings { evals: Vec::new(), out: None, fdr: 0.05, exact_small: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimecourseSettings {
    pub eval: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub top_k: usize,
}

impl Default for TimecourseSettings {
    fn default() -> Self {
        TimecourseSettings { eval: None, out: None, top_k: 10 }
    }
}

/// Defaults, overlaid by the TOML file at `path` when given.
pub fn base<T: Default + DeserializeOwned>(path: Option<&Path>) -> Result<T, CliError> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", p.display())))
        }
    }
}

/// Writes `settings` as `<name>-config.toml` in `dir`.
pub fn snapshot<T: Serialize>(settings: &T, dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    let text = toml::to_string_pretty(settings).map_err(|e| CliError::io(e.to_string()))?;
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{name}-config.toml"));
    fs::write(&path, text).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Replaces `slot` when the flag was given.
pub fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}
