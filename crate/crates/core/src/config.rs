//! Declarative experiment configuration.
//!
//! One JSON document with `data`, `model`, `pretrain`, `finetune`,
//! `metrics` and `io` sections. Every field has a default, so `{}` is a
//! valid config. Unknown keys are rejected, all of them at once.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::ModelConfig;
use crate::training::{FinetuneConfig, PretrainConfig, RunOptions};
use crate::util::sha256_hex;

/// Environment variable naming the directory relative data paths resolve against.
pub const DATA_ROOT_ENV: &str = "GSP_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory of volume containers for ingestion.
    pub volumes: Option<PathBuf>,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    /// Train manifest used by fine-tuning instead of `train_manifest`,
    /// typically the output of `synthesize`.
    pub finetune_train_manifest: Option<PathBuf>,
    pub tumor_slices: usize,
    pub healthy_slices: usize,
    pub image_size: usize,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            volumes: None,
            train_manifest: None,
            test_manifest: None,
            finetune_train_manifest: None,
            tumor_slices: 5,
            healthy_slices: 5,
            image_size: 256,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Peak value for PSNR on the `[0, 1]` scale.
    pub max_val: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { max_val: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub checkpoint_every: Option<u64>,
    pub max_steps: Option<u64>,
    pub verbose: bool,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: None,
            max_steps: None,
            verbose: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub metrics: MetricsConfig,
    pub io: IoConfig,
}

/// Dotted paths of keys in `user` that `reference` does not have. Objects
/// are compared recursively; anything else is a leaf.
pub fn unknown_keys(user: &Value, reference: &Value) -> Vec<String> {
    let mut out = Vec::new();
    walk(user, reference, "", &mut out);
    out
}

fn walk(user: &Value, reference: &Value, path: &str, out: &mut Vec<String>) {
    let (Value::Object(u), Value::Object(r)) = (user, reference) else {
        return;
    };
    for (k, v) in u {
        let p = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        match r.get(k) {
            Some(rv) => walk(v, rv, &p, out),
            None => out.push(p),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        if !user.is_object() {
            return Err(Error::config("config must be a JSON object"));
        }
        let reference = serde_json::to_value(Self::default()).expect("default config serializes");
        let unknown = unknown_keys(&user, &reference);
        if !unknown.is_empty() {
            return Err(Error::config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg: Self = serde_json::from_value(user).map_err(|e| Error::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        if self.data.image_size != self.model.generator.image_size {
            return Err(Error::config(format!(
                "data.image_size {} differs from model.generator.image_size {}",
                self.data.image_size, self.model.generator.image_size
            )));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(Error::config(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        if !(self.metrics.max_val > 0.0) {
            return Err(Error::config("metrics.max_val must be positive"));
        }
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_value().to_string().as_bytes())
    }

    pub fn run_options(&self, out_dir: Option<PathBuf>) -> RunOptions {
        RunOptions {
            out_dir,
            checkpoint_every: self.io.checkpoint_every,
            max_steps: self.io.max_steps,
            experiment: Some(self.to_value()),
            verbose: self.io.verbose,
        }
    }
}

/// Resolves a relative data path against the [`DATA_ROOT_ENV`] directory
/// when set, else against `fallback`.
pub fn resolve_data_path(path: &Path, fallback: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => fallback.join(path),
    }
}
