use gsp_autograd::{Session, Tensor, Var};

use super::{prefixed, GeneratorConfig, ParamShapes, TransformerConfig, NORM_EPS};
use crate::error::{Error, Result};

fn conv_shape(name: String, out: usize, inp: usize, k: usize) -> (String, Vec<usize>) {
    (format!("{name}.weight"), vec![out, inp, k, k])
}

fn norm_shapes(name: &str, c: usize) -> ParamShapes {
    vec![(format!("{name}.gamma"), vec![c]), (format!("{name}.beta"), vec![c])]
}

fn linear_shapes(name: &str, inp: usize, out: usize) -> ParamShapes {
    vec![(format!("{name}.weight"), vec![inp, out]), (format!("{name}.bias"), vec![out])]
}

fn instance_norm<'s>(s: &'s Session<'_>, name: &str, x: Var<'s>) -> Result<Var<'s>> {
    let g = s.param(&format!("{name}.gamma"))?;
    let b = s.param(&format!("{name}.beta"))?;
    Ok(x.instance_norm(g, b, NORM_EPS)?)
}

fn layer_norm<'s>(s: &'s Session<'_>, name: &str, x: Var<'s>) -> Result<Var<'s>> {
    let g = s.param(&format!("{name}.gamma"))?;
    let b = s.param(&format!("{name}.beta"))?;
    Ok(x.layer_norm(g, b, NORM_EPS)?)
}

/// `x W + b` over the last axis of a 2-d input.
fn linear<'s>(s: &'s Session<'_>, name: &str, x: Var<'s>) -> Result<Var<'s>> {
    let w = s.param(&format!("{name}.weight"))?;
    let b = s.param(&format!("{name}.bias"))?;
    Ok(x.matmul(w)?.add_bias(b)?)
}

fn dims4(op: &str, x: &Var<'_>) -> Result<[usize; 4]> {
    let shape = x.shape();
    shape
        .as_slice()
        .try_into()
        .map_err(|_| Error::config(format!("{op}: expected (N,C,H,W), got {shape:?}")))
}

fn expect_channels(op: &str, x: &Var<'_>, c: usize) -> Result<[usize; 4]> {
    let d = dims4(op, x)?;
    if d[1] != c {
        return Err(Error::config(format!("{op}: expected {c} channels, got {:?}", x.shape())));
    }
    Ok(d)
}

/// `x + F(x)` with `F = conv, norm, ReLU, conv, norm`, convs without bias.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub channels: usize,
    pub kernel: usize,
    /// Instance norm after each conv; off only for closed-form toy checks.
    pub norm: bool,
}

impl ResidualBlock {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            kernel: 3,
            norm: true,
        }
    }

    pub fn param_shapes(&self, prefix: &str) -> ParamShapes {
        let c = self.channels;
        let mut out = Vec::new();
        for i in 1..=2 {
            out.push(conv_shape(prefixed(prefix, &format!("conv{i}")), c, c, self.kernel));
            if self.norm {
                out.extend(norm_shapes(&prefixed(prefix, &format!("norm{i}")), c));
            }
        }
        out
    }

    pub fn forward<'s>(&self, s: &'s Session<'_>, prefix: &str, x: Var<'s>) -> Result<Var<'s>> {
        expect_channels("residual_block", &x, self.channels)?;
        let pad = self.kernel / 2;
        let mut h = x;
        for i in 1..=2 {
            if pad > 0 {
                h = h.reflect_pad2d(pad)?;
            }
            h = h.conv2d(s.param(&prefixed(prefix, &format!("conv{i}.weight")))?, 1, 0)?;
            if self.norm {
                h = instance_norm(s, &prefixed(prefix, &format!("norm{i}")), h)?;
            }
            if i == 1 {
                h = h.relu();
            }
        }
        Ok(x.add(h)?)
    }
}

/// Standard residual block over `x`'s channels.
pub fn residual_block<'s>(s: &'s Session<'_>, prefix: &str, x: Var<'s>) -> Result<Var<'s>> {
    let c = dims4("residual_block", &x)?[1];
    ResidualBlock::new(c).forward(s, prefix, x)
}

pub fn encoder_shapes(cfg: &GeneratorConfig) -> ParamShapes {
    let [w1, w2, w3] = cfg.widths;
    let mut out = vec![conv_shape("encoder.conv1".into(), w1, cfg.in_channels, 7)];
    out.extend(norm_shapes("encoder.norm1", w1));
    out.push(conv_shape("encoder.conv2".into(), w2, w1, 3));
    out.extend(norm_shapes("encoder.norm2", w2));
    out.push(conv_shape("encoder.conv3".into(), w3, w2, 3));
    out.extend(norm_shapes("encoder.norm3", w3));
    out
}

/// Reflect-pad 3 + conv7, then two stride-2 conv3; each followed by
/// instance norm and ReLU.
pub fn encoder_forward<'s>(s: &'s Session<'_>, cfg: &GeneratorConfig, x: Var<'s>) -> Result<Var<'s>> {
    let [_, _, h, w] = expect_channels("encoder", &x, cfg.in_channels)?;
    if h != w || h % 4 != 0 || h <= 3 {
        return Err(Error::config(format!(
            "encoder: input must be square with size a multiple of 4, got {h}x{w}"
        )));
    }
    let mut f = x.reflect_pad2d(3)?.conv2d(s.param("encoder.conv1.weight")?, 1, 0)?;
    f = instance_norm(s, "encoder.norm1", f)?.relu();
    for i in 2..=3 {
        f = f.conv2d(s.param(&format!("encoder.conv{i}.weight"))?, 2, 1)?;
        f = instance_norm(s, &format!("encoder.norm{i}"), f)?.relu();
    }
    Ok(f)
}

pub fn decoder_shapes(cfg: &GeneratorConfig) -> ParamShapes {
    let [w1, w2, w3] = cfg.widths;
    let mut out = vec![(String::from("decoder.deconv1.weight"), vec![w3, w2, 3, 3])];
    out.extend(norm_shapes("decoder.norm1", w2));
    out.push(("decoder.deconv2.weight".into(), vec![w2, w1, 3, 3]));
    out.extend(norm_shapes("decoder.norm2", w1));
    out.push(("decoder.out.weight".into(), vec![w1, cfg.out_channels, 7, 7]));
    out.push(("decoder.out.bias".into(), vec![cfg.out_channels]));
    out
}

/// Two stride-2 transposed conv3 (norm, ReLU), then a transposed conv7
/// projection with bias and tanh.
pub fn decoder_forward<'s>(s: &'s Session<'_>, cfg: &GeneratorConfig, f: Var<'s>) -> Result<Var<'s>> {
    expect_channels("decoder", &f, cfg.bottleneck())?;
    let mut h = f;
    for i in 1..=2 {
        h = h.conv_transpose2d(s.param(&format!("decoder.deconv{i}.weight"))?, 2, 1, 1)?;
        h = instance_norm(s, &format!("decoder.norm{i}"), h)?.relu();
    }
    h = h.conv_transpose2d(s.param("decoder.out.weight")?, 1, 3, 0)?;
    Ok(h.add_channel_bias(s.param("decoder.out.bias")?)?.tanh())
}

fn down_shapes(prefix: &str, t: &TransformerConfig, channels: usize) -> ParamShapes {
    let widths = t.down_widths(channels);
    let mut out = Vec::new();
    for (j, pair) in widths.windows(2).enumerate() {
        out.push(conv_shape(prefixed(prefix, &format!("conv{}", j + 1)), pair[1], pair[0], 3));
        out.extend(norm_shapes(&prefixed(prefix, &format!("norm{}", j + 1)), pair[1]));
    }
    out
}

/// `log2(M)` stride-2 conv3 layers (norm, ReLU) from `Nc` to `nc` channels.
pub fn downsample<'s>(
    s: &'s Session<'_>,
    prefix: &str,
    t: &TransformerConfig,
    x: Var<'s>,
) -> Result<Var<'s>> {
    let [_, c, h, w] = dims4("downsample", &x)?;
    let m = t.downsample_factor;
    if m == 0 || !m.is_power_of_two() || h % m != 0 || w % m != 0 {
        return Err(Error::config(format!(
            "downsample: {h}x{w} is not divisible by factor {m}"
        )));
    }
    let mut f = x;
    for j in 1..=t.down_widths(c).len() - 1 {
        f = f.conv2d(s.param(&prefixed(prefix, &format!("conv{j}.weight")))?, 2, 1)?;
        f = instance_norm(s, &prefixed(prefix, &format!("norm{j}")), f)?.relu();
    }
    Ok(f)
}

fn up_shapes(prefix: &str, t: &TransformerConfig, channels: usize) -> ParamShapes {
    let mut widths = t.down_widths(channels);
    widths.reverse();
    let mut out = Vec::new();
    for (j, pair) in widths.windows(2).enumerate() {
        out.push((
            prefixed(prefix, &format!("deconv{}.weight", j + 1)),
            vec![pair[0], pair[1], 3, 3],
        ));
        out.extend(norm_shapes(&prefixed(prefix, &format!("norm{}", j + 1)), pair[1]));
    }
    out
}

/// Mirror of [`downsample`]: stride-2 transposed conv3 layers back to `Nc`.
pub fn upsample<'s>(
    s: &'s Session<'_>,
    prefix: &str,
    t: &TransformerConfig,
    channels: usize,
    x: Var<'s>,
) -> Result<Var<'s>> {
    expect_channels("upsample", &x, t.nc(channels))?;
    let mut f = x;
    for j in 1..=t.down_steps() {
        f = f.conv_transpose2d(s.param(&prefixed(prefix, &format!("deconv{j}.weight")))?, 2, 1, 1)?;
        f = instance_norm(s, &prefixed(prefix, &format!("norm{j}")), f)?.relu();
    }
    Ok(f)
}

fn embed_shapes(prefix: &str, t: &TransformerConfig, nc: usize, h: usize) -> ParamShapes {
    let np = (h / t.patch) * (h / t.patch);
    let mut out = linear_shapes(&prefixed(prefix, "proj"), nc * t.patch * t.patch, t.nd);
    out.push((prefixed(prefix, "pos"), vec![np, t.nd]));
    out
}

/// Non-overlapping `P x P` patches, flattened channel-major, projected to
/// `ND` and offset by a learned positional encoding: `(N,nc,h,w) -> (N,NP,ND)`.
pub fn patch_embed<'s>(
    s: &'s Session<'_>,
    prefix: &str,
    t: &TransformerConfig,
    x: Var<'s>,
) -> Result<Var<'s>> {
    let [n, c, h, w] = dims4("patch_embed", &x)?;
    let p = t.patch;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!("patch_embed: {h}x{w} is not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let np = gh * gw;
    let patches = x
        .reshape(&[n, c, gh, p, gw, p])?
        .permute(&[0, 2, 4, 1, 3, 5])?
        .reshape(&[n * np, c * p * p])?;
    let tokens = linear(s, &prefixed(prefix, "proj"), patches)?;
    let pos = s.param(&prefixed(prefix, "pos"))?;
    if pos.shape() != [np, t.nd] {
        return Err(Error::config(format!(
            "patch_embed: positional encoding {:?} does not fit {np} tokens of width {}",
            pos.shape(),
            t.nd
        )));
    }
    let z = tokens
        .reshape(&[n, np * t.nd])?
        .add_bias(pos.reshape(&[np * t.nd])?)?;
    Ok(z.reshape(&[n, np, t.nd])?)
}

fn deflatten_shapes(prefix: &str, t: &TransformerConfig, nc: usize) -> ParamShapes {
    linear_shapes(&prefixed(prefix, "proj"), t.nd, nc * t.patch * t.patch)
}

/// Inverse arrangement of [`patch_embed`]: `(N,NP,ND) -> (N,nc,h,w)`.
pub fn deflatten<'s>(
    s: &'s Session<'_>,
    prefix: &str,
    t: &TransformerConfig,
    nc: usize,
    h: usize,
    w: usize,
    z: Var<'s>,
) -> Result<Var<'s>> {
    let p = t.patch;
    let shape = z.shape();
    let (gh, gw) = (h / p, w / p);
    if shape.len() != 3 || shape[1] != gh * gw || shape[2] != t.nd || h % p != 0 || w % p != 0 {
        return Err(Error::config(format!(
            "deflatten: tokens {shape:?} do not tile a {h}x{w} map with patch {p}"
        )));
    }
    let n = shape[0];
    let flat = linear(s, &prefixed(prefix, "proj"), z.reshape(&[n * gh * gw, t.nd])?)?;
    Ok(flat
        .reshape(&[n, gh, gw, nc, p, p])?
        .permute(&[0, 3, 1, 4, 2, 5])?
        .reshape(&[n, nc, h, w])?)
}

fn layer_shapes(prefix: &str, t: &TransformerConfig) -> ParamShapes {
    let mut out = norm_shapes(&prefixed(prefix, "ln1"), t.nd);
    for m in ["q", "k", "v", "o"] {
        out.extend(linear_shapes(&prefixed(prefix, &format!("attn.{m}")), t.nd, t.nd));
    }
    out.extend(norm_shapes(&prefixed(prefix, "ln2"), t.nd));
    out.extend(linear_shapes(&prefixed(prefix, "mlp.fc1"), t.nd, t.hidden));
    out.extend(linear_shapes(&prefixed(prefix, "mlp.fc2"), t.hidden, t.nd));
    out
}

/// Multi-head self-attention over `(N,NP,ND)`. When `trace` is given, the
/// `(N*heads, NP, NP)` attention weights are appended to it.
pub fn attention<'s>(
    s: &'s Session<'_>,
    prefix: &str,
    t: &TransformerConfig,
    x: Var<'s>,
    trace: Option<&mut Vec<Tensor>>,
) -> Result<Var<'s>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[2] != t.nd || t.nd % t.heads != 0 {
        return Err(Error::config(format!(
            "attention: tokens {shape:?} vs nd {} with {} heads",
            t.nd, t.heads
        )));
    }
    let (n, np, nd, nh) = (shape[0], shape[1], t.nd, t.heads);
    let dh = nd / nh;
    let flat = x.reshape(&[n * np, nd])?;
    let split = |v: Var<'s>| -> Result<Var<'s>> {
        Ok(v.reshape(&[n, np, nh, dh])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[n * nh, np, dh])?)
    };
    let q = split(linear(s, &prefixed(prefix, "q"), flat)?)?;
    let k = split(linear(s, &prefixed(prefix, "k"), flat)?)?;
    let v = split(linear(s, &prefixed(prefix, "v"), flat)?)?;
    let scores = q.bmm(k.transpose_last()?)?.scale(1.0 / (dh as f64).sqrt());
    let weights = scores.softmax();
    if let Some(trace) = trace {
        trace.push(weights.value().as_ref().clone());
    }
    let mixed = weights
        .bmm(v)?
        .reshape(&[n, nh, np, dh])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[n * np, nd])?;
    Ok(linear(s, &prefixed(prefix, "o"), mixed)?.reshape(&[n, np, nd])?)
}

/// Pre-norm encoder layer: `z' = MSA(LN(z)) + z`, `out = MLP(LN(z')) + z'`.
pub fn transformer_layer<'s>(
    s: &'s Session<'_>,
    prefix: &str,
    t: &TransformerConfig,
    z: Var<'s>,
    trace: Option<&mut Vec<Tensor>>,
) -> Result<Var<'s>> {
    let shape = z.shape();
    let a = attention(
        s,
        &prefixed(prefix, "attn"),
        t,
        layer_norm(s, &prefixed(prefix, "ln1"), z)?,
        trace,
    )?;
    let z1 = z.add(a)?;
    let rows = z1.reshape(&[shape[0] * shape[1], t.nd])?;
    let h = layer_norm(s, &prefixed(prefix, "ln2"), rows)?;
    let h = linear(s, &prefixed(prefix, "mlp.fc1"), h)?.gelu();
    let h = linear(s, &prefixed(prefix, "mlp.fc2"), h)?;
    Ok(z1.add(h.reshape(&shape)?)?)
}

/// Concatenates `g` and `f` along channels and compresses back to `f`'s
/// width with a biased 1x1 conv.
pub fn fuse_compress<'s>(s: &'s Session<'_>, prefix: &str, g: Var<'s>, f: Var<'s>) -> Result<Var<'s>> {
    let dg = dims4("fuse_compress", &g)?;
    let df = dims4("fuse_compress", &f)?;
    if dg[0] != df[0] || dg[2..] != df[2..] {
        return Err(Error::config(format!(
            "fuse_compress: {:?} and {:?} differ spatially",
            g.shape(),
            f.shape()
        )));
    }
    let cat = Var::concat(&[g, f], 1)?;
    let out = cat.conv2d(s.param(&prefixed(prefix, "weight"))?, 1, 0)?;
    Ok(out.add_channel_bias(s.param(&prefixed(prefix, "bias"))?)?)
}

/// One ART slot. With a transformer: downsample, embed, transformer layers,
/// deflatten, upsample, fuse with the input, residual block. Without: the
/// residual block alone.
#[derive(Clone, Debug, PartialEq)]
pub struct ArtBlock {
    /// 1-indexed slot.
    pub index: usize,
    pub channels: usize,
    pub map_size: usize,
    pub transformer: Option<TransformerConfig>,
}

impl ArtBlock {
    pub fn prefix(&self) -> String {
        format!("art.{}", self.index)
    }

    pub fn param_shapes(&self) -> ParamShapes {
        let p = self.prefix();
        let c = self.channels;
        let mut out = Vec::new();
        if let Some(t) = &self.transformer {
            let nc = t.nc(c);
            let h = self.map_size / t.downsample_factor;
            out.extend(down_shapes(&format!("{p}.down"), t, c));
            out.extend(embed_shapes(&format!("{p}.embed"), t, nc, h));
            for l in 1..=t.layers {
                out.extend(layer_shapes(&format!("{p}.transformer.layer{l}"), t));
            }
            out.extend(deflatten_shapes(&format!("{p}.deflatten"), t, nc));
            out.extend(up_shapes(&format!("{p}.up"), t, c));
            out.push(conv_shape(format!("{p}.compress"), c, 2 * c, 1));
            out.push((format!("{p}.compress.bias"), vec![c]));
        }
        out.extend(ResidualBlock::new(c).param_shapes(&format!("{p}.res")));
        out
    }

    pub fn forward<'s>(
        &self,
        s: &'s Session<'_>,
        f: Var<'s>,
        mut trace: Option<&mut Vec<Tensor>>,
    ) -> Result<Var<'s>> {
        let p = self.prefix();
        let [_, _, h, w] = expect_channels("art_block", &f, self.channels)?;
        let fused = match &self.transformer {
            None => f,
            Some(t) => {
                let down = downsample(s, &format!("{p}.down"), t, f)?;
                let [_, nc, dh, dw] = dims4("art_block", &down)?;
                let mut z = patch_embed(s, &format!("{p}.embed"), t, down)?;
                for l in 1..=t.layers {
                    z = transformer_layer(
                        s,
                        &format!("{p}.transformer.layer{l}"),
                        t,
                        z,
                        trace.as_deref_mut(),
                    )?;
                }
                let g = deflatten(s, &format!("{p}.deflatten"), t, nc, dh, dw, z)?;
                let g = upsample(s, &format!("{p}.up"), t, self.channels, g)?;
                let gd = dims4("art_block", &g)?;
                if gd[2] != h || gd[3] != w {
                    return Err(Error::config(format!(
                        "art_block: upsampled {:?} does not match input {h}x{w}",
                        g.shape()
                    )));
                }
                fuse_compress(s, &format!("{p}.compress"), g, f)?
            }
        };
        ResidualBlock::new(self.channels).forward(s, &format!("{p}.res"), fused)
    }
}

/// Classification head settings.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSpec {
    pub channels: usize,
    pub hidden: usize,
    pub classes: usize,
    pub dropout: f64,
}

impl HeadSpec {
    pub fn param_shapes(&self) -> ParamShapes {
        let mut out = linear_shapes("head.fc1", self.channels, self.hidden);
        out.extend(norm_shapes("head.norm", self.hidden));
        out.extend(linear_shapes("head.fc2", self.hidden, self.classes));
        out
    }
}

/// Spatial mean, dense, layer norm, dropout (training only), dense, softmax.
pub fn mlp_head_forward<'s>(s: &'s Session<'_>, head: &HeadSpec, f: Var<'s>) -> Result<Var<'s>> {
    expect_channels("mlp_head", &f, head.channels)?;
    let pooled = f.spatial_mean()?;
    let h = linear(s, "head.fc1", pooled)?;
    let h = layer_norm(s, "head.norm", h)?;
    let h = s.dropout(h, head.dropout)?;
    Ok(linear(s, "head.fc2", h)?.softmax())
}
