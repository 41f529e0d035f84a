use std::collections::BTreeMap;

use gsp_autograd::{Adam, AdamConfig, Session, Tensor, Var};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{
    batch_indices, check_sizes, config_digest, non_finite_params, sequence_list, stack_channels, steps_per_epoch,
    RunLog, RunOptions, StepRecord,
};
use crate::data::io::write_json;
use crate::data::{ClassLabel, DatasetManifest, Sequence, SliceRecord, Synthesizer};
use crate::error::{Error, Result};
use crate::losses::{
    l_pix, l_rec, lsgan_d_loss, lsgan_g_loss, total_generator_loss, total_generator_loss_var, AvailabilityMask,
    LossWeights,
};
use crate::metrics::SynthesisReport;
use crate::models::{
    save_checkpoint, Checkpoint, CheckpointKind, CheckpointManifest, Discriminator, Generator, ModelConfig,
};
use crate::util::derive_seed;

pub const PRETRAIN_COLUMNS: [&str; 5] = ["l_pix", "l_rec", "l_adv_G", "l_adv_D", "total"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub sources: Vec<Sequence>,
    pub targets: Vec<Sequence>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            sources: vec![Sequence::T1],
            targets: vec![Sequence::T2],
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.999,
            epochs: 100,
            batch: 1,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config(format!(
                "pretrain: lr must be positive and betas in [0, 1), got lr {} betas ({}, {})",
                self.lr, self.beta1, self.beta2
            )));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::config("pretrain: epochs and batch must be at least 1"));
        }
        if self.sources.is_empty() || self.targets.is_empty() {
            return Err(Error::config("pretrain: needs at least one source and one target sequence"));
        }
        if let Some(s) = self.sources.iter().find(|s| self.targets.contains(s)) {
            return Err(Error::config(format!("pretrain: {s} is both source and target")));
        }
        self.weights.validate()
    }

    /// Participating channels in ascending order.
    pub fn channels(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self
            .sources
            .iter()
            .chain(&self.targets)
            .map(|s| s.channel())
            .collect();
        c.sort_unstable();
        c.dedup();
        c
    }

    /// Mask over [`PretrainConfig::channels`].
    pub fn mask(&self) -> AvailabilityMask {
        let src: Vec<usize> = self.sources.iter().map(|s| s.channel()).collect();
        AvailabilityMask::unchecked(self.channels().iter().map(|c| src.contains(c)).collect())
    }

    pub fn task_name(&self) -> String {
        format!("{}->{}", sequence_list(&self.sources), sequence_list(&self.targets))
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

/// Co-registered slices of several sequences at one `(case, slice)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedSlice {
    pub case_id: String,
    pub slice_index: Option<usize>,
    pub class_label: ClassLabel,
    pub images: BTreeMap<Sequence, Array2<f32>>,
}

/// Groups real records by `(case, slice)` and keeps the groups holding every
/// sequence in `needed`, in canonical order.
pub fn build_pairs(manifest: &DatasetManifest, needed: &[Sequence]) -> Vec<PairedSlice> {
    let mut groups: BTreeMap<(String, Option<usize>), PairedSlice> = BTreeMap::new();
    for r in manifest.records.iter().filter(|r| r.provenance == crate::data::Provenance::Real) {
        let entry = groups.entry(r.pair_key()).or_insert_with(|| PairedSlice {
            case_id: r.case_id.clone(),
            slice_index: r.slice_index,
            class_label: r.class_label,
            images: BTreeMap::new(),
        });
        entry.images.entry(r.sequence).or_insert_with(|| r.pixels.clone());
    }
    let total = groups.len();
    let pairs: Vec<PairedSlice> = groups
        .into_values()
        .filter(|p| needed.iter().all(|s| p.images.contains_key(s)))
        .collect();
    if pairs.len() < total {
        log::warn!(
            "{}: {} of {total} slice groups lack one of {} and are left out",
            manifest.name,
            total - pairs.len(),
            sequence_list(needed)
        );
    }
    pairs
}

/// Tensors for one generator/discriminator step.
pub struct PairBatch {
    /// Generator input: source channels, zeros elsewhere.
    pub xg: Tensor,
    /// Every participating channel.
    pub full: Tensor,
    /// Ones on participating channels.
    pub participation: Tensor,
}

impl PairBatch {
    pub fn new(pairs: &[&PairedSlice], cfg: &PretrainConfig, channels: usize, size: usize) -> Result<Self> {
        let pick = |seqs: &[Sequence]| -> Vec<Vec<(usize, &Array2<f32>)>> {
            pairs
                .iter()
                .map(|p| seqs.iter().map(|s| (s.channel(), &p.images[s])).collect())
                .collect()
        };
        let all: Vec<Sequence> = cfg.sources.iter().chain(&cfg.targets).copied().collect();
        if let Some(p) = pairs.iter().find(|p| all.iter().any(|s| !p.images.contains_key(s))) {
            return Err(Error::data(format!(
                "case {}: slice group lacks one of {}",
                p.case_id,
                sequence_list(&all)
            )));
        }
        let part = cfg.channels();
        let plane = size * size;
        let participation = Tensor::from_fn(&[pairs.len(), channels, size, size], |i| {
            if part.contains(&((i / plane) % channels)) {
                1.0
            } else {
                0.0
            }
        });
        Ok(Self {
            xg: stack_channels(&pick(&cfg.sources), channels, size),
            full: stack_channels(&pick(&all), channels, size),
            participation,
        })
    }
}

fn cat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (sa, sb) = (a.shape(), b.shape());
    let (n, ca, cb, plane) = (sa[0], sa[1], sb[1], sa[2] * sa[3]);
    let mut data = Vec::with_capacity(a.numel() + b.numel());
    for i in 0..n {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(vec![n, ca + cb, sa[2], sa[3]], data).expect("sizes agree")
}

fn select_channels<'g>(x: Var<'g>, channels: &[usize]) -> Result<Var<'g>> {
    let parts = channels
        .iter()
        .map(|&c| x.narrow(1, c, 1))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Var::concat(&parts, 1)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainState {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub step: u64,
}

impl PretrainState {
    pub fn new(model: &ModelConfig, cfg: &PretrainConfig) -> Result<Self> {
        model.validate()?;
        cfg.validate()?;
        Ok(Self {
            generator: Generator::new(model.generator.clone(), derive_seed(cfg.seed, "generator-init", 0))?,
            discriminator: Discriminator::new(
                model.discriminator.clone(),
                derive_seed(cfg.seed, "discriminator-init", 0),
            ),
            opt_g: Adam::new(cfg.adam()),
            opt_d: Adam::new(cfg.adam()),
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, config: serde_json::Value, seed: u64, loss_digest: String) -> Checkpoint {
        let mut tensors = self.generator.params.clone();
        tensors.extend(self.discriminator.params.clone());
        for (k, t) in self.opt_g.export_state("optim.g").into_iter().chain(self.opt_d.export_state("optim.d")) {
            tensors.insert(k, t);
        }
        Checkpoint {
            manifest: CheckpointManifest {
                kind: CheckpointKind::Pretrain,
                config_digest: config_digest(&config),
                config,
                step: self.step,
                seed,
                loss_digest,
            },
            tensors,
        }
    }

    /// Restores generator, discriminator and both optimizers.
    pub fn from_checkpoint(ckpt: &Checkpoint, model: &ModelConfig, cfg: &PretrainConfig) -> Result<Self> {
        if ckpt.manifest.kind != CheckpointKind::Pretrain {
            return Err(Error::checkpoint("manifest", "not a pretraining checkpoint"));
        }
        let pick = |prefixes: &[&str]| {
            ckpt.tensors
                .iter()
                .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect()
        };
        let generator = Generator::from_params(model.generator.clone(), pick(&["encoder.", "art.", "decoder."]))?;
        let discriminator = Discriminator::from_params(model.discriminator.clone(), pick(&["disc."]))?;
        let step = ckpt.manifest.step;
        Ok(Self {
            generator,
            discriminator,
            opt_g: Adam::import_state(cfg.adam(), step, "optim.g", ckpt.tensors.iter()),
            opt_d: Adam::import_state(cfg.adam(), step, "optim.d", ckpt.tensors.iter()),
            step,
        })
    }
}

/// Model configuration stored in a checkpoint manifest.
pub(crate) fn model_from_manifest(ckpt: &Checkpoint) -> Result<ModelConfig> {
    let model = ckpt
        .manifest
        .config
        .get("model")
        .ok_or_else(|| Error::checkpoint("manifest", "config has no model section"))?;
    serde_json::from_value(model.clone()).map_err(|e| Error::checkpoint("manifest", e.to_string()))
}

impl Generator {
    /// Generator stored in a pretraining checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let model = model_from_manifest(ckpt)?;
        let params = ["encoder.", "art.", "decoder."]
            .iter()
            .flat_map(|p| ckpt.group(p).into_inner())
            .collect();
        Generator::from_params(model.generator, params)
    }
}

/// One discriminator update on the detached synthesis, then one generator
/// update against the updated discriminator. Returns the five loss columns.
pub fn pretrain_step(state: &mut PretrainState, batch: &PairBatch, cfg: &PretrainConfig) -> Result<Vec<f64>> {
    let channels = cfg.channels();
    let mask = cfg.mask();
    let gcfg = state.generator.config.clone();
    let dcfg = state.discriminator.config.clone();

    let sg = Session::new(&state.generator.params);
    let pred = Generator::forward_with(&gcfg, &sg, sg.input(batch.xg.clone()))?;
    let fake = pred.value().zip_map(&batch.participation, |p, m| p * m);

    let (l_adv_d, d_grads) = {
        let sd = Session::new(&state.discriminator.params);
        let real = Discriminator::forward_with(&dcfg, &sd, sd.input(cat_channels(&batch.xg, &batch.full)))?;
        let fake = Discriminator::forward_with(&dcfg, &sd, sd.input(cat_channels(&batch.xg, &fake)))?;
        let loss = lsgan_d_loss(real, fake)?;
        let value = loss.value().item();
        (value, sd.param_grads(&sd.backward(loss)))
    };
    if !l_adv_d.is_finite() {
        return Err(Error::Numeric(format!("step {}: discriminator loss {l_adv_d}", state.step)));
    }
    state.opt_d.step(&mut state.discriminator.params, &d_grads)?;

    let m = sg.input(batch.full.clone());
    let pred_p = select_channels(pred, &channels)?;
    let m_p = select_channels(m, &channels)?;
    let lp = l_pix(pred_p, m_p, &mask)?;
    let lr = l_rec(pred_p, m_p, &mask)?;
    let adv = if cfg.weights.adv != 0.0 {
        sg.add_constants(state.discriminator.params.clone());
        let candidate = pred.mul(sg.input(batch.participation.clone()))?;
        let d_in = Var::concat(&[sg.input(batch.xg.clone()), candidate], 1)?;
        Some(lsgan_g_loss(Discriminator::forward_with(&dcfg, &sg, d_in)?))
    } else {
        None
    };
    let total = total_generator_loss_var(lp, lr, adv, &cfg.weights)?;
    let (vp, vr) = (lp.value().item(), lr.value().item());
    let va = match adv {
        Some(a) => a.value().item(),
        None => {
            // Not part of the objective; scored for the log only.
            let sd = Session::new(&state.discriminator.params);
            let d = Discriminator::forward_with(&dcfg, &sd, sd.input(cat_channels(&batch.xg, &fake)))?;
            lsgan_g_loss(d).value().item()
        }
    };
    let vt = total_generator_loss(vp, vr, va, &cfg.weights)?;
    if !vt.is_finite() || !total.value().item().is_finite() {
        return Err(Error::Numeric(format!(
            "step {}: generator loss not finite (pix {vp}, rec {vr}, adv {va})",
            state.step
        )));
    }
    let g_grads = sg.param_grads(&sg.backward(total));
    drop(sg);
    state.opt_g.step(&mut state.generator.params, &g_grads)?;
    let bad = non_finite_params(&state.generator.params);
    if !bad.is_empty() {
        return Err(Error::Numeric(format!(
            "step {}: non-finite generator parameters: {}",
            state.step,
            bad.join(", ")
        )));
    }
    state.step += 1;
    Ok(vec![vp, vr, va, l_adv_d, vt])
}

/// Scores every target channel of the generator output against the real
/// target slice.
pub fn evaluate_synthesis(
    generator: &Generator,
    pairs: &[PairedSlice],
    cfg: &PretrainConfig,
    batch: usize,
    max_val: f64,
) -> Result<SynthesisReport> {
    let size = generator.config.image_size;
    let channels = generator.config.in_channels;
    let mut synthetic: Vec<(Array2<f32>, Array2<f32>)> = Vec::new();
    for chunk in pairs.chunks(batch.max(1)) {
        let refs: Vec<&PairedSlice> = chunk.iter().collect();
        let b = PairBatch::new(&refs, cfg, channels, size)?;
        let out = generator.forward(&b.xg)?;
        let plane = size * size;
        for (n, p) in chunk.iter().enumerate() {
            for t in &cfg.targets {
                let c = t.channel();
                let start = (n * channels + c) * plane;
                let img = Array2::from_shape_vec(
                    (size, size),
                    out.data()[start..start + plane].iter().map(|&v| v as f32).collect(),
                )
                .expect("plane size");
                synthetic.push((img, p.images[t].clone()));
            }
        }
    }
    SynthesisReport::from_pairs(
        cfg.task_name(),
        synthetic.iter().map(|(a, b)| (a.view(), b.view())),
        max_val,
    )
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: PretrainState,
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    pub report: Option<SynthesisReport>,
}

fn stage_config(model: &ModelConfig, cfg: &PretrainConfig, opts: &RunOptions) -> serde_json::Value {
    serde_json::json!({
        "model": model,
        "pretrain": cfg,
        "experiment": opts.experiment,
    })
}

/// Seeded epoch loop over paired slices of `train`, scored on `test` at the
/// end. With `resume`, training continues from the checkpoint's step.
pub fn run_pretrain(
    train: &DatasetManifest,
    test: Option<&DatasetManifest>,
    model: &ModelConfig,
    cfg: &PretrainConfig,
    opts: &RunOptions,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    model.validate()?;
    cfg.validate()?;
    let size = model.generator.image_size;
    check_sizes(train.records.iter(), size)?;
    let needed: Vec<Sequence> = cfg.sources.iter().chain(&cfg.targets).copied().collect();
    let pairs = build_pairs(train, &needed);
    if pairs.is_empty() {
        return Err(Error::data(format!(
            "{}: no slice groups with {}",
            train.name,
            sequence_list(&needed)
        )));
    }
    let config = stage_config(model, cfg, opts);
    let digest = config_digest(&config);
    let mut state = match resume {
        Some(ckpt) => PretrainState::from_checkpoint(ckpt, model, cfg)?,
        None => PretrainState::new(model, cfg)?,
    };
    let spe = steps_per_epoch(pairs.len(), cfg.batch) as u64;
    let mut total = spe * cfg.epochs as u64;
    if let Some(cap) = opts.max_steps {
        total = total.min(cap);
    }
    let mut log = RunLog::new("pretrain", cfg.seed, digest, &PRETRAIN_COLUMNS);
    let channels = model.generator.in_channels;
    while state.step < total {
        let step = state.step;
        let idx = batch_indices(pairs.len(), cfg.batch, cfg.seed, "pretrain-epoch", step);
        let refs: Vec<&PairedSlice> = idx.iter().map(|&i| &pairs[i]).collect();
        let batch = PairBatch::new(&refs, cfg, channels, size)?;
        let values = match pretrain_step(&mut state, &batch, cfg) {
            Ok(v) => v,
            Err(e @ Error::Numeric(_)) => {
                if let Some(dir) = &opts.out_dir {
                    let cases: Vec<&str> = refs.iter().map(|p| p.case_id.as_str()).collect();
                    write_json(
                        &dir.join("diagnostic.json"),
                        &serde_json::json!({"step": step, "error": e.to_string(), "cases": cases, "recent": log.steps.iter().rev().take(5).collect::<Vec<_>>()}),
                    )?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let epoch = (step / spe) as usize;
        if opts.verbose {
            println!(
                "pretrain step {} epoch {epoch} l_pix {:.5} l_rec {:.5} l_adv_G {:.5} l_adv_D {:.5} total {:.5}",
                step + 1,
                values[0],
                values[1],
                values[2],
                values[3],
                values[4]
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
                save_checkpoint(&ck, &dir.join(format!("pretrain-step{:06}.gspckpt", state.step)))?;
            }
        }
    }
    let report = match test {
        Some(t) if !t.is_empty() => {
            check_sizes(t.records.iter(), size)?;
            let test_pairs = build_pairs(t, &needed);
            if test_pairs.is_empty() {
                None
            } else {
                let r = evaluate_synthesis(&state.generator, &test_pairs, cfg, cfg.batch.max(8), 1.0)?;
                let mut metrics = BTreeMap::new();
                metrics.insert("psnr".to_string(), r.psnr_summary.mean);
                metrics.insert("ssim".to_string(), r.ssim_summary.mean);
                metrics.insert("mse".to_string(), r.mse_summary.mean);
                log.evals.push(super::EvalRecord {
                    epoch: (state.step.saturating_sub(1) / spe) as usize,
                    step: state.step,
                    metrics,
                });
                Some(r)
            }
        }
        _ => None,
    };
    let checkpoint = state.to_checkpoint(config, cfg.seed, log.loss_digest());
    if let Some(dir) = &opts.out_dir {
        log.write(dir, "pretrain_log")?;
    }
    Ok(PretrainOutcome {
        state,
        checkpoint,
        log,
        report,
    })
}

/// Generator-backed [`Synthesizer`] producing one target sequence.
pub struct GeneratorSynthesizer<'a> {
    pub generator: &'a Generator,
    pub sources: Vec<Sequence>,
    pub target: Sequence,
}

impl Synthesizer for GeneratorSynthesizer<'_> {
    fn sources(&self) -> Vec<Sequence> {
        self.sources.clone()
    }

    fn target(&self) -> Sequence {
        self.target
    }

    fn synthesize(&self, inputs: &[&SliceRecord]) -> Result<Array2<f32>> {
        let size = self.generator.config.image_size;
        check_sizes(inputs.iter().copied(), size)?;
        let chans: Vec<(usize, &Array2<f32>)> = inputs.iter().map(|r| (r.sequence.channel(), &r.pixels)).collect();
        let x = stack_channels(&[chans], self.generator.config.in_channels, size);
        let out = self.generator.forward(&x)?;
        let plane = size * size;
        let c = self.target.channel();
        Ok(Array2::from_shape_vec(
            (size, size),
            out.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f32).collect(),
        )
        .expect("plane size"))
    }
}
