//! Generator, PatchGAN discriminator and classifier assemblies, plus
//! checkpoints and encoder/ART weight transfer.

mod checkpoint;
mod dump;
mod transfer;

use gsp_autograd::{ParamStore, Session, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{
    decoder_forward, decoder_shapes, encoder_forward, encoder_shapes, mlp_head_forward,
    GeneratorConfig, HeadSpec, ParamShapes, NORM_EPS,
};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, CheckpointManifest};
pub use dump::{dump_activations, ActivationEntry};
pub use transfer::{transfer_weights, TransferReport};

fn shapes_to_store_check(params: &ParamStore, shapes: &ParamShapes, what: &str) -> Result<()> {
    for (name, shape) in shapes {
        match params.get(name) {
            None => return Err(Error::config(format!("{what}: missing parameter {name}"))),
            Some(t) if t.shape() != shape.as_slice() => {
                return Err(Error::config(format!(
                    "{what}: parameter {name} has shape {:?}, config expects {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Encoder followed by the nine ART slots.
pub fn bottleneck_forward<'s>(
    s: &'s Session<'_>,
    cfg: &GeneratorConfig,
    x: Var<'s>,
    mut trace: Option<&mut Vec<Tensor>>,
) -> Result<Var<'s>> {
    let mut f = encoder_forward(s, cfg, x)?;
    for block in cfg.art_blocks() {
        f = block.forward(s, f, trace.as_deref_mut())?;
    }
    Ok(f)
}

pub fn bottleneck_shapes(cfg: &GeneratorConfig) -> ParamShapes {
    let mut out = encoder_shapes(cfg);
    for block in cfg.art_blocks() {
        out.extend(block.param_shapes());
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamStore,
}

impl Generator {
    pub fn new(config: GeneratorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = crate::nn::init_params(&Self::param_shapes(&config), seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: GeneratorConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        shapes_to_store_check(&params, &Self::param_shapes(&config), "generator")?;
        Ok(Self { config, params })
    }

    pub fn param_shapes(cfg: &GeneratorConfig) -> ParamShapes {
        let mut out = bottleneck_shapes(cfg);
        out.extend(decoder_shapes(cfg));
        out
    }

    pub fn forward_with<'s>(cfg: &GeneratorConfig, s: &'s Session<'_>, x: Var<'s>) -> Result<Var<'s>> {
        let f = bottleneck_forward(s, cfg, x, None)?;
        decoder_forward(s, cfg, f)
    }

    /// Evaluation-mode forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = Session::new(&self.params);
        let out = Self::forward_with(&self.config, &s, s.input(x.clone()))?;
        Ok(out.value().as_ref().clone())
    }

    /// Bottleneck features after the ninth ART slot.
    pub fn bottleneck(&self, x: &Tensor) -> Result<Tensor> {
        let s = Session::new(&self.params);
        let f = bottleneck_forward(&s, &self.config, s.input(x.clone()), None)?;
        Ok(f.value().as_ref().clone())
    }

    /// Attention weights of every transformer layer, in forward order.
    pub fn attention_maps(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let s = Session::new(&self.params);
        let mut trace = Vec::new();
        bottleneck_forward(&s, &self.config, s.input(x.clone()), Some(&mut trace))?;
        Ok(trace)
    }
}

/// Stage-by-stage output shapes of the generator for an `(n, C, S, S)`
/// input, computed by arithmetic only.
pub fn trace_generator_shapes(cfg: &GeneratorConfig, n: usize) -> Result<Vec<(String, Vec<usize>)>> {
    cfg.validate()?;
    let s = cfg.image_size;
    let [w1, w2, w3] = cfg.widths;
    let mut out = vec![
        ("input".to_string(), vec![n, cfg.in_channels, s, s]),
        ("encoder.conv1".into(), vec![n, w1, s, s]),
        ("encoder.conv2".into(), vec![n, w2, s / 2, s / 2]),
        ("encoder.conv3".into(), vec![n, w3, s / 4, s / 4]),
    ];
    let b = s / 4;
    for block in cfg.art_blocks() {
        let p = block.prefix();
        if let Some(t) = &block.transformer {
            let h = b / t.downsample_factor;
            let np = (h / t.patch) * (h / t.patch);
            out.push((format!("{p}.down"), vec![n, t.nc(w3), h, h]));
            out.push((format!("{p}.embed"), vec![n, np, t.nd]));
            out.push((format!("{p}.transformer"), vec![n, np, t.nd]));
            out.push((format!("{p}.deflatten"), vec![n, t.nc(w3), h, h]));
            out.push((format!("{p}.up"), vec![n, w3, b, b]));
            out.push((format!("{p}.compress"), vec![n, w3, b, b]));
        }
        out.push((format!("{p}.res"), vec![n, w3, b, b]));
    }
    out.push(("decoder.deconv1".into(), vec![n, w2, s / 2, s / 2]));
    out.push(("decoder.deconv2".into(), vec![n, w1, s, s]));
    out.push(("decoder.out".into(), vec![n, cfg.out_channels, s, s]));
    Ok(out)
}

pub fn param_count(shapes: &ParamShapes) -> usize {
    shapes.iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    /// Source channels plus candidate channels.
    pub in_channels: usize,
    pub widths: [usize; 4],
    pub slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 6,
            widths: [64, 128, 256, 512],
            slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn toy() -> Self {
        Self {
            in_channels: 6,
            widths: [8, 16, 32, 64],
            slope: 0.2,
        }
    }

    /// Side of the score map for an `S x S` input.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        if size % 16 != 0 || size < 32 {
            return Err(Error::config(format!(
                "discriminator input size {size} must be a multiple of 16, at least 32"
            )));
        }
        Ok(size / 8 - 2)
    }
}

/// 70x70 PatchGAN: four conv4 layers (stride 2, 2, 2, 1; instance norm
/// from the second on; LeakyReLU) and a conv4 to one score channel.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamStore,
}

impl Discriminator {
    pub fn new(config: DiscriminatorConfig, seed: u64) -> Self {
        let params = crate::nn::init_params(&Self::param_shapes(&config), seed);
        Self { config, params }
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamStore) -> Result<Self> {
        shapes_to_store_check(&params, &Self::param_shapes(&config), "discriminator")?;
        Ok(Self { config, params })
    }

    pub fn param_shapes(cfg: &DiscriminatorConfig) -> ParamShapes {
        let mut out = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, &w) in cfg.widths.iter().enumerate() {
            out.push((format!("disc.conv{}.weight", i + 1), vec![w, c_in, 4, 4]));
            if i > 0 {
                out.push((format!("disc.norm{}.gamma", i + 1), vec![w]));
                out.push((format!("disc.norm{}.beta", i + 1), vec![w]));
            }
            c_in = w;
        }
        out.push(("disc.conv5.weight".into(), vec![1, c_in, 4, 4]));
        out.push(("disc.conv5.bias".into(), vec![1]));
        out
    }

    pub fn forward_with<'s>(cfg: &DiscriminatorConfig, s: &'s Session<'_>, x: Var<'s>) -> Result<Var<'s>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != cfg.in_channels {
            return Err(Error::config(format!(
                "discriminator: expected (N,{},H,W), got {shape:?}",
                cfg.in_channels
            )));
        }
        cfg.output_size(shape[2])?;
        let mut h = x;
        for i in 1..=4 {
            let stride = if i < 4 { 2 } else { 1 };
            h = h.conv2d(s.param(&format!("disc.conv{i}.weight"))?, stride, 1)?;
            if i > 1 {
                let g = s.param(&format!("disc.norm{i}.gamma"))?;
                let b = s.param(&format!("disc.norm{i}.beta"))?;
                h = h.instance_norm(g, b, NORM_EPS)?;
            }
            h = h.leaky_relu(cfg.slope);
        }
        h = h.conv2d(s.param("disc.conv5.weight")?, 1, 1)?;
        Ok(h.add_channel_bias(s.param("disc.conv5.bias")?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = Session::new(&self.params);
        let out = Self::forward_with(&self.config, &s, s.input(x.clone()))?;
        Ok(out.value().as_ref().clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            hidden: 256,
            classes: 4,
            dropout: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub backbone: GeneratorConfig,
    pub head: HeadConfig,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            backbone: GeneratorConfig::default(),
            head: HeadConfig::default(),
        }
    }
}

impl ClassifierConfig {
    pub fn head_spec(&self) -> HeadSpec {
        HeadSpec {
            channels: self.backbone.bottleneck(),
            hidden: self.head.hidden,
            classes: self.head.classes,
            dropout: self.head.dropout,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.head.classes < 2 || self.head.hidden == 0 {
            return Err(Error::config("head needs at least 2 classes and a positive hidden width"));
        }
        if !(0.0..1.0).contains(&self.head.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 1)", self.head.dropout)));
        }
        Ok(())
    }
}

/// Encoder, ART slots and an MLP head producing class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ParamStore,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = crate::nn::init_params(&Self::param_shapes(&config), seed);
        Ok(Self { config, params })
    }

    pub fn from_params(config: ClassifierConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        shapes_to_store_check(&params, &Self::param_shapes(&config), "classifier")?;
        Ok(Self { config, params })
    }

    pub fn param_shapes(cfg: &ClassifierConfig) -> ParamShapes {
        let mut out = bottleneck_shapes(&cfg.backbone);
        out.extend(cfg.head_spec().param_shapes());
        out
    }

    pub fn forward_with<'s>(cfg: &ClassifierConfig, s: &'s Session<'_>, x: Var<'s>) -> Result<Var<'s>> {
        let f = bottleneck_forward(s, &cfg.backbone, x, None)?;
        mlp_head_forward(s, &cfg.head_spec(), f)
    }

    /// Evaluation-mode class probabilities `(N, K)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = Session::new(&self.params);
        let out = Self::forward_with(&self.config, &s, s.input(x.clone()))?;
        Ok(out.value().as_ref().clone())
    }

    pub fn bottleneck(&self, x: &Tensor) -> Result<Tensor> {
        let s = Session::new(&self.params);
        let f = bottleneck_forward(&s, &self.config.backbone, s.input(x.clone()), None)?;
        Ok(f.value().as_ref().clone())
    }

    /// Argmax class of every row.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let probs = self.forward(x)?;
        let k = self.config.head.classes;
        Ok(probs
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                    .0
            })
            .collect())
    }
}

/// Architecture settings shared by both training stages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    /// 32x32 toy geometry for tests and desk-scale runs.
    pub fn toy() -> Self {
        Self {
            generator: GeneratorConfig::toy(),
            discriminator: DiscriminatorConfig::toy(),
            head: HeadConfig {
                hidden: 32,
                ..HeadConfig::default()
            },
        }
    }

    pub fn classifier(&self) -> ClassifierConfig {
        ClassifierConfig {
            backbone: self.generator.clone(),
            head: self.head.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.classifier().validate()?;
        let g = &self.generator;
        if self.discriminator.in_channels != g.in_channels + g.out_channels {
            return Err(Error::config(format!(
                "discriminator in_channels {} must equal generator in + out channels {}",
                self.discriminator.in_channels,
                g.in_channels + g.out_channels
            )));
        }
        self.discriminator.output_size(g.image_size)?;
        Ok(())
    }
}
