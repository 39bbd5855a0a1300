use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use polyrnn::data::SynthConfig;
use polyrnn::model::{sha256_hex, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything a training run depends on. Every section is optional in the
/// file and falls back to its defaults; unknown keys are rejected.
///
/// ```json
/// {
///   "model": { "grid": { "grid_size": 28, "canonical_size": 224 }, "hidden": 16 },
///   "train": { "epochs": 20, "lr": 1e-4, "seed": 0 },
///   "train_data": "data/train.json",
///   "eval_data": "data/test.json"
/// }
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Model shapes.
    pub model: ModelConfig,
    /// Optimizer schedule and seed.
    pub train: TrainConfig,
    /// Generator settings used by `synth`.
    pub synth: SynthConfig,
    pub train_data: Option<PathBuf>,
    pub eval_data: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a config file. Relative data paths in it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: Self =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.train_data, &mut cfg.eval_data].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// The file at `path` if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Hash of the canonical JSON form, which is what outputs record.
    pub fn sha256(&self) -> String {
        sha256_hex(self.to_json().as_bytes())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Hash of a dataset file's bytes, recorded next to results.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}
