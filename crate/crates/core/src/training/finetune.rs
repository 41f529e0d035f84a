use std::collections::BTreeMap;

use gsp_autograd::{Adam, AdamConfig, ParamStore, Session, Tensor};
use serde::{Deserialize, Serialize};

use super::{
    batch_indices, check_sizes, config_digest, group_prefix, non_finite_params, stack_channels, steps_per_epoch,
    EvalRecord, RunLog, RunOptions, StepRecord,
};
use crate::data::{ClassLabel, DatasetManifest, Sequence, SliceRecord};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::metrics::{classification_report, ClassificationReport};
use crate::models::{
    save_checkpoint, transfer_weights, Checkpoint, CheckpointKind, CheckpointManifest, Classifier, ModelConfig,
    TransferReport,
};
use crate::util::{derive_seed, stream_rng};

pub const FINETUNE_COLUMNS: [&str; 2] = ["loss", "batch_accuracy"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    /// Sequence the classifier is trained and tested on.
    pub sequence: Sequence,
    /// Class set, in output order.
    pub classes: Vec<ClassLabel>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Parameter groups held fixed, by name prefix (`encoder`, `art.3`, `head`).
    pub freeze_groups: Vec<String>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            sequence: Sequence::T1,
            classes: ClassLabel::ALL.to_vec(),
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            epochs: 100,
            batch: 16,
            freeze_groups: Vec::new(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!(
                "finetune: lr must be positive and betas in [0, 1), got lr {} betas ({}, {})",
                self.lr, self.beta1, self.beta2
            )));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("finetune: epochs and batch must be at least 1"));
        }
        if self.classes.len() < 2 {
            return Err(Error::config("finetune: class set needs at least two classes"));
        }
        let mut seen = self.classes.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::config("finetune: class set has duplicates"));
        }
        Ok(())
    }

    pub fn label_of(&self, class: ClassLabel) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::data(format!("label {class} outside the configured class set")))
    }

    fn frozen_prefixes(&self) -> Vec<String> {
        self.freeze_groups.iter().map(|g| group_prefix(g)).collect()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }
}

/// `(N, C, S, S)` input with each slice in its sequence's channel.
pub fn classifier_input(records: &[&SliceRecord], channels: usize, size: usize) -> Tensor {
    let chans: Vec<_> = records
        .iter()
        .map(|r| vec![(r.sequence.channel(), &r.pixels)])
        .collect();
    stack_channels(&chans, channels, size)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneState {
    pub classifier: Classifier,
    pub opt: Adam,
    pub step: u64,
}

impl FinetuneState {
    /// Fresh classifier; with `init`, encoder and ART tensors are then
    /// copied from it.
    pub fn new(
        model: &ModelConfig,
        cfg: &FinetuneConfig,
        init: Option<&ParamStore>,
    ) -> Result<(Self, Option<TransferReport>)> {
        cfg.validate()?;
        let mut ccfg = model.classifier();
        ccfg.head.classes = cfg.classes.len();
        let mut classifier = Classifier::new(ccfg, derive_seed(cfg.seed, "classifier-init", 0))?;
        let report = match init {
            Some(src) => Some(transfer_weights(src, &mut classifier)?),
            None => None,
        };
        let state = Self {
            classifier,
            opt: Adam::new(cfg.adam()),
            step: 0,
        };
        Ok((state, report))
    }

    pub fn to_checkpoint(&self, config: serde_json::Value, seed: u64, loss_digest: String) -> Checkpoint {
        let mut tensors = self.classifier.params.clone();
        for (k, t) in self.opt.export_state("optim.c") {
            tensors.insert(k, t);
        }
        Checkpoint {
            manifest: CheckpointManifest {
                kind: CheckpointKind::Classifier,
                config_digest: config_digest(&config),
                config,
                step: self.step,
                seed,
                loss_digest,
            },
            tensors,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, model: &ModelConfig, cfg: &FinetuneConfig) -> Result<Self> {
        if ckpt.manifest.kind != CheckpointKind::Classifier {
            return Err(Error::checkpoint("manifest", "not a classifier checkpoint"));
        }
        let mut ccfg = model.classifier();
        ccfg.head.classes = cfg.classes.len();
        let params: ParamStore = ckpt
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("optim."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        let step = ckpt.manifest.step;
        Ok(Self {
            classifier: Classifier::from_params(ccfg, params)?,
            opt: Adam::import_state(cfg.adam(), step, "optim.c", ckpt.tensors.iter()),
            step,
        })
    }
}

impl Classifier {
    /// Classifier stored in a fine-tuning checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = super::pretrain::model_from_manifest(ckpt)?;
        let classes = ckpt
            .manifest
            .config
            .get("finetune")
            .and_then(|f| f.get("classes"))
            .and_then(|c| c.as_array())
            .map(|c| c.len())
            .unwrap_or(model.head.classes);
        let mut ccfg = model.classifier();
        ccfg.head.classes = classes;
        let params = ckpt
            .tensors
            .iter()
            .filter(|(k, _)| !k.starts_with("optim."))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        Classifier::from_params(ccfg, params)
    }
}

/// One cross-entropy step over the non-frozen parameters. Returns
/// `[loss, batch accuracy]`.
pub fn finetune_step(state: &mut FinetuneState, x: &Tensor, labels: &[usize], cfg: &FinetuneConfig) -> Result<Vec<f64>> {
    let ccfg = state.classifier.config.clone();
    let frozen = cfg.frozen_prefixes();
    let rng = stream_rng(cfg.seed, "dropout", state.step);
    let s = Session::new(&state.classifier.params)
        .with_frozen(&frozen)
        .training(rng);
    let probs = Classifier::forward_with(&ccfg, &s, s.input(x.clone()))?;
    let loss = cross_entropy(probs, labels)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("step {}: cross-entropy {value}", state.step)));
    }
    let p = probs.value();
    let k = ccfg.head.classes;
    let correct = p
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| row.iter().all(|&v| v <= row[l]))
        .count();
    let grads = s.param_grads(&s.backward(loss));
    drop(s);
    state.opt.step(&mut state.classifier.params, &grads)?;
    let bad = non_finite_params(&state.classifier.params);
    if !bad.is_empty() {
        return Err(Error::Numeric(format!(
            "step {}: non-finite classifier parameters: {}",
            state.step,
            bad.join(", ")
        )));
    }
    state.step += 1;
    Ok(vec![value, correct as f64 / labels.len() as f64])
}

fn labeled<'a>(manifest: &'a DatasetManifest, cfg: &FinetuneConfig) -> Result<(Vec<&'a SliceRecord>, Vec<usize>)> {
    let records: Vec<&SliceRecord> = manifest.of_sequence(cfg.sequence).collect();
    let labels = records
        .iter()
        .map(|r| cfg.label_of(r.class_label))
        .collect::<Result<Vec<_>>>()?;
    Ok((records, labels))
}

/// Eval-mode predictions over `manifest`'s slices of the configured sequence.
pub fn evaluate_classifier(
    classifier: &Classifier,
    manifest: &DatasetManifest,
    cfg: &FinetuneConfig,
) -> Result<ClassificationReport> {
    let (records, labels) = labeled(manifest, cfg)?;
    if records.is_empty() {
        return Err(Error::data(format!("{}: no {} slices to evaluate", manifest.name, cfg.sequence)));
    }
    let size = classifier.config.backbone.image_size;
    check_sizes(records.iter().copied(), size)?;
    let mut preds = Vec::with_capacity(records.len());
    for chunk in records.chunks(cfg.batch.max(1)) {
        let x = classifier_input(chunk, classifier.config.backbone.in_channels, size);
        preds.extend(classifier.predict(&x)?);
    }
    classification_report(&labels, &preds, cfg.classes.len())
}

#[derive(Debug)]
pub struct FinetuneOutcome {
    pub state: FinetuneState,
    /// Final-step checkpoint.
    pub last: Checkpoint,
    /// Checkpoint of the epoch with the highest test accuracy.
    pub best: Checkpoint,
    pub best_epoch: usize,
    pub report: ClassificationReport,
    pub log: RunLog,
    pub transfer: Option<TransferReport>,
}

/// Trains on `train`, scoring `test` after every epoch. `init` supplies
/// encoder and ART tensors for transfer; `resume` continues a run.
pub fn run_finetune(
    train: &DatasetManifest,
    test: &DatasetManifest,
    model: &ModelConfig,
    cfg: &FinetuneConfig,
    init: Option<&ParamStore>,
    opts: &RunOptions,
    resume: Option<&Checkpoint>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    model.validate()?;
    let size = model.generator.image_size;
    let (records, labels) = labeled(train, cfg)?;
    if records.is_empty() {
        return Err(Error::data(format!("{}: no {} slices to train on", train.name, cfg.sequence)));
    }
    check_sizes(records.iter().copied(), size)?;
    labeled(test, cfg)?;
    let config = serde_json::json!({
        "model": model,
        "finetune": cfg,
        "experiment": opts.experiment,
    });
    let digest = config_digest(&config);
    let (mut state, transfer) = match resume {
        Some(ck) => (FinetuneState::from_checkpoint(ck, model, cfg)?, None),
        None => FinetuneState::new(model, cfg, init)?,
    };
    let spe = steps_per_epoch(records.len(), cfg.batch) as u64;
    let mut total = spe * cfg.epochs as u64;
    if let Some(cap) = opts.max_steps {
        total = total.min(cap);
    }
    let channels = model.generator.in_channels;
    let mut log = RunLog::new("finetune", cfg.seed, digest, &FINETUNE_COLUMNS);
    let mut best: Option<(f64, usize, Checkpoint, ClassificationReport)> = None;
    while state.step < total {
        let step = state.step;
        let idx = batch_indices(records.len(), cfg.batch, cfg.seed, "finetune-epoch", step);
        let batch: Vec<&SliceRecord> = idx.iter().map(|&i| records[i]).collect();
        let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let x = classifier_input(&batch, channels, size);
        let values = finetune_step(&mut state, &x, &y, cfg)?;
        let epoch = (step / spe) as usize;
        if opts.verbose {
            println!(
                "finetune step {} epoch {epoch} loss {:.5} batch_accuracy {:.3}",
                step + 1,
                values[0],
                values[1]
            );
        }
        log.push(StepRecord {
            step: step + 1,
            epoch,
            values,
        })?;
        if let (Some(dir), Some(every)) = (&opts.out_dir, opts.checkpoint_every) {
            if every > 0 && state.step % every == 0 {
                let ck = state.to_checkpoint(config.clone(), cfg.seed, log.loss_digest());
                save_checkpoint(&ck, &dir.join(format!("finetune-step{:06}.gspckpt", state.step)))?;
            }
        }
        if state.step % spe == 0 || state.step == total {
            let report = evaluate_classifier(&state.classifier, test, cfg)?;
            if opts.verbose {
                println!("finetune epoch {epoch} test accuracy {:.4}", report.accuracy);
            }
            let mut metrics = BTreeMap::new();
            metrics.insert("accuracy".into(), report.accuracy);
            metrics.insert("precision".into(), report.precision);
            metrics.insert("recall".into(), report.recall);
            metrics.insert("f1".into(), report.f1);
            log.evals.push(EvalRecord {
                epoch,
                step: state.step,
                metrics,
            });
            if best.as_ref().is_none_or(|b| report.accuracy > b.0) {
                let ck = state.to_checkpoint(config.clone(), cfg.seed, log.loss_digest());
                best = Some((report.accuracy, epoch, ck, report));
            }
        }
    }
    let last = state.to_checkpoint(config, cfg.seed, log.loss_digest());
    let (best_epoch, best_ck, report) = match best {
        Some((_, e, ck, r)) => (e, ck, r),
        None => (0, last.clone(), evaluate_classifier(&state.classifier, test, cfg)?),
    };
    if let Some(dir) = &opts.out_dir {
        log.write(dir, "finetune_log")?;
    }
    Ok(FinetuneOutcome {
        state,
        last,
        best: best_ck,
        best_epoch,
        report,
        log,
        transfer,
    })
}
