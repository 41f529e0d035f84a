//! Deterministic training engine for both stages.
//!
//! Every random draw comes from a stream derived from `(seed, purpose,
//! index)`: initialization per tensor name, shuffling per epoch, dropout per
//! step. A run is therefore a pure function of seed, config and data, and
//! resuming at step `k` replays exactly what an uninterrupted run does.

mod finetune;
mod pretrain;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::io::write_json;
use crate::data::{Sequence, SliceRecord};
use crate::error::{Error, Result};
use crate::util::{f64_digest, sha256_hex, stream_rng};
use gsp_autograd::{ParamStore, Tensor};

pub use finetune::{
    classifier_input, evaluate_classifier, finetune_step, run_finetune, FinetuneConfig, FinetuneOutcome,
    FinetuneState,
};
pub use pretrain::{
    build_pairs, evaluate_synthesis, pretrain_step, run_pretrain, GeneratorSynthesizer, PairBatch, PairedSlice,
    PretrainConfig, PretrainOutcome, PretrainState,
};

/// One optimizer step's scalars, in the order of [`RunLog::columns`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub epoch: usize,
    pub step: u64,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub kind: String,
    pub seed: u64,
    pub config_digest: String,
    pub columns: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl RunLog {
    pub fn new(kind: &str, seed: u64, config_digest: String, columns: &[&str]) -> Self {
        Self {
            kind: kind.into(),
            seed,
            config_digest,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            steps: Vec::new(),
            evals: Vec::new(),
        }
    }

    pub fn push(&mut self, record: StepRecord) -> Result<()> {
        if let Some(last) = self.steps.last() {
            if record.step <= last.step {
                return Err(Error::Numeric(format!(
                    "run log: step {} after step {}",
                    record.step, last.step
                )));
            }
        }
        self.steps.push(record);
        Ok(())
    }

    /// Values of one column across all steps.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.steps.iter().map(|s| s.values[i]).collect())
    }

    pub fn loss_digest(&self) -> String {
        f64_digest(self.steps.iter().flat_map(|s| s.values.iter().copied()))
    }

    /// `step` followed by every column.
    pub fn to_csv(&self) -> String {
        let mut out = format!("step,{}\n", self.columns.join(","));
        for s in &self.steps {
            let vals: Vec<String> = s.values.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},{}\n", s.step, vals.join(",")));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let keys: Vec<&String> = self
            .evals
            .first()
            .map(|e| e.metrics.keys().collect())
            .unwrap_or_default();
        let mut out = String::from("epoch,step");
        for k in &keys {
            out.push(',');
            out.push_str(k);
        }
        out.push('\n');
        for e in &self.evals {
            out.push_str(&format!("{},{}", e.epoch, e.step));
            for k in &keys {
                out.push_str(&format!(",{}", e.metrics.get(*k).copied().unwrap_or(f64::NAN)));
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        write_json(&dir.join(format!("{stem}.json")), self)?;
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Run-level settings that do not change the optimization itself.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Where periodic checkpoints and the run log go.
    pub out_dir: Option<PathBuf>,
    /// Save a checkpoint every this many steps.
    pub checkpoint_every: Option<u64>,
    /// Stop after this many total steps, even mid-epoch.
    pub max_steps: Option<u64>,
    /// Configuration recorded (and digested) in logs and checkpoints; the
    /// stage's own config is used when absent.
    pub experiment: Option<serde_json::Value>,
    /// Print progress lines to standard output.
    pub verbose: bool,
}

pub(crate) fn config_digest(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

/// Steps per epoch for `n` samples.
pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Sample indices of global step `step`: epoch `step / spe` uses its own
/// seeded permutation.
pub fn batch_indices(n: usize, batch: usize, seed: u64, stream: &str, step: u64) -> Vec<usize> {
    let spe = steps_per_epoch(n, batch) as u64;
    let epoch = step / spe;
    let b = (step % spe) as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, stream, epoch));
    order[b * batch..((b + 1) * batch).min(n)].to_vec()
}

/// Stacks single-channel images into `(N, 1, S, S)`-ordered data for
/// channel `channel` of a `channels`-channel tensor, other channels zero.
pub(crate) fn stack_channels(images: &[Vec<(usize, &Array2<f32>)>], channels: usize, size: usize) -> Tensor {
    let plane = size * size;
    let mut data = vec![0.0; images.len() * channels * plane];
    for (n, chans) in images.iter().enumerate() {
        for &(c, img) in chans {
            let dst = &mut data[(n * channels + c) * plane..(n * channels + c + 1) * plane];
            for (d, &v) in dst.iter_mut().zip(img.iter()) {
                *d = v as f64;
            }
        }
    }
    Tensor::new(vec![images.len(), channels, size, size], data).expect("sizes agree")
}

pub(crate) fn check_sizes<'a>(records: impl Iterator<Item = &'a SliceRecord>, size: usize) -> Result<()> {
    for r in records {
        if r.size() != size {
            return Err(Error::data(format!(
                "case {} {}: slice is {}x{}, model expects {size}x{size}",
                r.case_id,
                r.sequence,
                r.size(),
                r.size()
            )));
        }
    }
    Ok(())
}

pub(crate) fn non_finite_params(params: &ParamStore) -> Vec<String> {
    params
        .iter()
        .filter(|(_, t)| !t.all_finite())
        .map(|(k, _)| k.clone())
        .collect()
}

pub(crate) fn sequence_list(seqs: &[Sequence]) -> String {
    seqs.iter().map(|s| s.name()).collect::<Vec<_>>().join("+")
}

/// Prefix form of a freeze group: `encoder` becomes `encoder.`.
pub fn group_prefix(group: &str) -> String {
    if group.ends_with('.') {
        group.to_string()
    } else {
        format!("{group}.")
    }
}
