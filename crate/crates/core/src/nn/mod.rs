//! Differentiable building blocks and their configurations.
//!
//! Every block describes its parameters through `param_shapes`, which is the
//! single source for initialization, checkpoint layout and symbolic shape
//! checks. Linear weights are stored `(in, out)`; conv weights
//! `(out, in, k, k)`; transposed-conv weights `(in, out, k, k)`.

mod blocks;

use gsp_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::stream_rng;

pub use blocks::{
    attention, decoder_forward, decoder_shapes, deflatten, downsample, encoder_forward, encoder_shapes,
    fuse_compress, mlp_head_forward, patch_embed, residual_block, transformer_layer, upsample, ArtBlock,
    HeadSpec, ResidualBlock,
};

pub const NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
pub const ART_BLOCKS: usize = 9;
/// 1-indexed ART slots that carry a transformer branch.
pub const TRANSFORMER_SLOTS: [usize; 2] = [1, 6];

pub type ParamShapes = Vec<(String, Vec<usize>)>;

/// `N(0, 0.02)` for weights and positional encodings, ones for norm gains,
/// zeros for norm shifts and biases. Each tensor draws from its own stream
/// keyed by name, so a tensor's initial value does not depend on which
/// other tensors exist.
pub fn init_params(shapes: &[(String, Vec<usize>)], seed: u64) -> ParamStore {
    shapes
        .iter()
        .map(|(name, shape)| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            let t = match leaf {
                "gamma" => Tensor::ones(shape),
                "beta" | "bias" => Tensor::zeros(shape),
                _ => Tensor::randn(shape, INIT_STD, &mut stream_rng(seed, name, 0)),
            };
            (name.clone(), t)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub nd: usize,
    pub hidden: usize,
    pub patch: usize,
    pub downsample_factor: usize,
    /// Channel width after downsampling; `None` means `Nc / M`.
    pub down_channels: Option<usize>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            layers: 12,
            heads: 12,
            nd: 768,
            hidden: 3072,
            patch: 16,
            downsample_factor: 4,
            down_channels: None,
        }
    }
}

impl TransformerConfig {
    pub fn toy() -> Self {
        Self {
            layers: 2,
            heads: 2,
            nd: 32,
            hidden: 64,
            patch: 1,
            downsample_factor: 4,
            down_channels: None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.nd / self.heads.max(1)
    }

    /// Number of stride-2 convolutions realizing the downsampling factor.
    pub fn down_steps(&self) -> usize {
        self.downsample_factor.trailing_zeros() as usize
    }

    pub fn nc(&self, channels: usize) -> usize {
        self.down_channels
            .unwrap_or(channels / self.downsample_factor.max(1))
    }

    /// Channel widths from `Nc` down to `nc`, one entry per stage.
    pub fn down_widths(&self, channels: usize) -> Vec<usize> {
        let nc = self.nc(channels);
        let steps = self.down_steps();
        let mut w = vec![channels];
        for i in 0..steps {
            w.push(if i + 1 == steps { nc } else { (channels >> (i + 1)).max(nc) });
        }
        w
    }

    pub fn validate(&self, channels: usize, map_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.layers == 0 || self.heads == 0 || self.nd == 0 || self.hidden == 0 || self.patch == 0 {
            return bad("transformer layers, heads, nd, hidden and patch must be positive".into());
        }
        if self.nd % self.heads != 0 {
            return bad(format!("nd {} is not divisible by {} heads", self.nd, self.heads));
        }
        let m = self.downsample_factor;
        if m == 0 || !m.is_power_of_two() {
            return bad(format!("downsample_factor {m} must be a power of two"));
        }
        if map_size % m != 0 {
            return bad(format!("feature map size {map_size} is not divisible by downsample_factor {m}"));
        }
        if self.nc(channels) == 0 {
            return bad(format!("downsampled width is zero for {channels} channels and M={m}"));
        }
        let h = map_size / m;
        if h % self.patch != 0 {
            return bad(format!("downsampled size {h} is not divisible by patch {}", self.patch));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Encoder widths; the last one is the bottleneck width `Nc`.
    pub widths: [usize; 3],
    pub transformer: TransformerConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 256,
            in_channels: 3,
            out_channels: 3,
            widths: [64, 128, 256],
            transformer: TransformerConfig::default(),
        }
    }
}

impl GeneratorConfig {
    /// 32x32 inputs, widths 8/16/32, two 2-head transformer layers with ND=32.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            out_channels: 3,
            widths: [8, 16, 32],
            transformer: TransformerConfig::toy(),
        }
    }

    pub fn bottleneck(&self) -> usize {
        self.widths[2]
    }

    pub fn bottleneck_size(&self) -> usize {
        self.image_size / 4
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::config(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.image_size <= 3 {
            return Err(Error::config("image_size too small for reflection padding"));
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.widths.contains(&0) {
            return Err(Error::config("channel widths must be positive"));
        }
        self.transformer
            .validate(self.bottleneck(), self.bottleneck_size())
    }

    pub fn art_blocks(&self) -> Vec<ArtBlock> {
        (1..=ART_BLOCKS)
            .map(|i| ArtBlock {
                index: i,
                channels: self.bottleneck(),
                map_size: self.bottleneck_size(),
                transformer: TRANSFORMER_SLOTS
                    .contains(&i)
                    .then(|| self.transformer.clone()),
            })
            .collect()
    }
}

pub(crate) fn prefixed(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
