//! Finite-difference checks of every block and loss on small random instances.

use gsp_autograd::{check_inputs, check_params, GradCheckConfig, GradCheckReport, ParamStore, Session, Tensor, Var};
use gsp_core::losses::{cross_entropy, l_pix, l_rec, lsgan_d_loss, lsgan_g_loss, AvailabilityMask};
use gsp_core::models::{Discriminator, DiscriminatorConfig, Generator};
use gsp_core::nn::{
    attention, decoder_forward, decoder_shapes, deflatten, downsample, encoder_forward, encoder_shapes,
    fuse_compress, mlp_head_forward, patch_embed, transformer_layer, upsample, ArtBlock, GeneratorConfig, HeadSpec,
    ResidualBlock, TransformerConfig,
};

use super::{gradcheck, probe, random_params, rng};

fn tiny_transformer() -> TransformerConfig {
    TransformerConfig {
        layers: 1,
        heads: 2,
        nd: 4,
        hidden: 6,
        patch: 1,
        downsample_factor: 2,
        down_channels: None,
    }
}

pub fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        image_size: 8,
        in_channels: 2,
        out_channels: 2,
        widths: [2, 3, 4],
        transformer: tiny_transformer(),
    }
}

fn input(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn run<F>(params: &ParamStore, seed: u64, f: F) -> GradCheckReport
where
    F: for<'s> Fn(&'s Session<'_>) -> gsp_core::Result<Var<'s>>,
{
    check_params(params, gradcheck(), |s| Ok(probe(s, f(s).expect("forward"), seed)))
        .expect("gradcheck runs")
}

/// Gradient checks of every network block for one random instance.
pub fn block_reports(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut out = Vec::new();
    let t = tiny_transformer();
    let x4 = input(&[2, 4, 4, 4], seed);

    let rb = ResidualBlock::new(4);
    let p = random_params(&rb.param_shapes("res"), seed);
    let x = x4.clone();
    out.push(("residual_block", run(&p, seed, |s| rb.forward(s, "res", s.input(x.clone())))));

    let g = tiny_generator();
    let p = random_params(&encoder_shapes(&g), seed);
    let x = input(&[2, 2, 8, 8], seed + 1);
    out.push(("encoder", run(&p, seed, |s| encoder_forward(s, &g, s.input(x.clone())))));

    let p = random_params(&decoder_shapes(&g), seed);
    let x = x4.clone();
    out.push(("decoder", run(&p, seed, |s| decoder_forward(s, &g, s.input(x.clone())))));

    let block = ArtBlock {
        index: 1,
        channels: 4,
        map_size: 4,
        transformer: Some(t.clone()),
    };
    let p = random_params(&block.param_shapes(), seed);
    let x = x4.clone();
    out.push(("downsample", run(&p, seed, |s| downsample(s, "art.1.down", &t, s.input(x.clone())))));
    let xd = input(&[2, 2, 2, 2], seed + 2);
    out.push(("upsample", run(&p, seed, |s| upsample(s, "art.1.up", &t, 4, s.input(xd.clone())))));
    out.push(("patch_embed", run(&p, seed, |s| patch_embed(s, "art.1.embed", &t, s.input(xd.clone())))));
    let z = input(&[2, 4, 4], seed + 3);
    out.push((
        "deflatten",
        run(&p, seed, |s| deflatten(s, "art.1.deflatten", &t, 2, 2, 2, s.input(z.clone()))),
    ));
    out.push((
        "attention",
        run(&p, seed, |s| attention(s, "art.1.transformer.layer1.attn", &t, s.input(z.clone()), None)),
    ));
    out.push((
        "transformer_layer",
        run(&p, seed, |s| transformer_layer(s, "art.1.transformer.layer1", &t, s.input(z.clone()), None)),
    ));
    let gx = input(&[2, 4, 4, 4], seed + 4);
    out.push((
        "fuse_compress",
        run(&p, seed, |s| fuse_compress(s, "art.1.compress", s.input(gx.clone()), s.input(x4.clone()))),
    ));
    out.push(("art_block", run(&p, seed, |s| block.forward(s, s.input(x4.clone()), None))));

    let head = HeadSpec {
        channels: 4,
        hidden: 5,
        classes: 3,
        dropout: 0.0,
    };
    let p = random_params(&head.param_shapes(), seed);
    out.push(("mlp_head", run(&p, seed, |s| mlp_head_forward(s, &head, s.input(x4.clone())))));

    let d = DiscriminatorConfig {
        in_channels: 2,
        widths: [2, 3, 3, 4],
        slope: 0.2,
    };
    let p = random_params(&Discriminator::param_shapes(&d), seed);
    let x = input(&[1, 2, 32, 32], seed + 5);
    out.push(("discriminator", run(&p, seed, |s| Discriminator::forward_with(&d, s, s.input(x.clone())))));

    // 16 px keeps the downsampled transformer map at 2x2; instance norm over a
    // single pixel is flat and finite differences only see its epsilon
    let g = GeneratorConfig {
        image_size: 16,
        ..tiny_generator()
    };
    let p = random_params(&Generator::param_shapes(&g), seed);
    let x = input(&[1, 2, 16, 16], seed + 6);
    // Thirty-odd ReLUs deep, a 1e-4 step straddles kinks on some instances;
    // 1e-6 avoids them and the floor absorbs the rounding noise on key biases,
    // whose gradient is exactly zero under softmax
    let cfg = GradCheckConfig {
        step: 1e-6,
        floor: 1e-4,
        ..gradcheck()
    };
    let report = check_params(&p, cfg, |s| {
        Ok(probe(s, Generator::forward_with(&g, s, s.input(x.clone())).expect("forward"), seed))
    })
    .expect("gradcheck runs");
    out.push(("generator", report));
    out
}

/// Gradient checks of every loss with respect to its inputs.
fn ok(v: gsp_core::Result<Var<'_>>) -> gsp_autograd::Result<Var<'_>> {
    v.map_err(|e| gsp_autograd::TensorError::invalid("loss", e.to_string()))
}

pub fn loss_reports(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let cfg = gradcheck();
    let mask = AvailabilityMask::new(vec![true, false, true]).unwrap();
    let pred = input(&[2, 3, 4, 4], seed);
    let m = input(&[2, 3, 4, 4], seed + 1);
    let scores = input(&[2, 1, 3, 3], seed + 2);
    let fake = input(&[2, 1, 3, 3], seed + 3);
    let mut r = rng(seed + 4);
    let probs = Tensor::uniform(&[5, 4], 0.05, 1.0, &mut r);
    let labels = super::random_labels(5, 4, seed);
    vec![
        (
            "l_pix",
            check_inputs(&[pred.clone(), m.clone()], cfg, |_, v| ok(l_pix(v[0], v[1], &mask))).unwrap(),
        ),
        (
            "l_rec",
            check_inputs(&[pred.clone(), m.clone()], cfg, |_, v| ok(l_rec(v[0], v[1], &mask))).unwrap(),
        ),
        (
            "lsgan_d",
            check_inputs(&[scores.clone(), fake.clone()], cfg, |_, v| ok(lsgan_d_loss(v[0], v[1]))).unwrap(),
        ),
        ("lsgan_g", check_inputs(&[fake], cfg, |_, v| Ok(lsgan_g_loss(v[0]))).unwrap()),
        (
            "cross_entropy",
            check_inputs(&[probs], cfg, |_, v| ok(cross_entropy(v[0], &labels))).unwrap(),
        ),
    ]
}
