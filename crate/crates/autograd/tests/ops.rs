use gsp_autograd::{check_inputs, kernels, Adam, AdamConfig, GradCheckConfig, Graph, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Direct summation: out[n,o,y,x] = sum_{c,i,j} x[n,c,y*s+i-p, x*s+j-p] * w[o,c,i,j].
fn naive_conv2d(x: &Tensor, w: &Tensor, s: usize, p: usize) -> Tensor {
    let [n, c, h, wd] = x.dims4("t").unwrap();
    let [o, _, k, _] = w.dims4("t").unwrap();
    let oh = (h + 2 * p - k) / s + 1;
    let ow = (wd + 2 * p - k) / s + 1;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    for b in 0..n {
        for oc in 0..o {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for i in 0..k {
                            for j in 0..k {
                                let iy = (y * s + i) as isize - p as isize;
                                let ix = (xx * s + j) as isize - p as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.data()[((b * c + ic) * h + iy as usize) * wd + ix as usize]
                                    * w.data()[((oc * c + ic) * k + i) * k + j];
                            }
                        }
                    }
                    out.data_mut()[((b * o + oc) * oh + y) * ow + xx] = acc;
                }
            }
        }
    }
    out
}

/// Scatter form: every input pixel adds w * x at out[y*s + i - p, x*s + j - p].
fn naive_conv_transpose2d(x: &Tensor, w: &Tensor, s: usize, p: usize, op: usize) -> Tensor {
    let [n, ci, h, wd] = x.dims4("t").unwrap();
    let [_, co, k, _] = w.dims4("t").unwrap();
    let oh = (h - 1) * s + k + op - 2 * p;
    let ow = (wd - 1) * s + k + op - 2 * p;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    for b in 0..n {
        for ic in 0..ci {
            for y in 0..h {
                for xx in 0..wd {
                    let v = x.data()[((b * ci + ic) * h + y) * wd + xx];
                    for oc in 0..co {
                        for i in 0..k {
                            for j in 0..k {
                                let oy = (y * s + i) as isize - p as isize;
                                let ox = (xx * s + j) as isize - p as isize;
                                if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize {
                                    continue;
                                }
                                out.data_mut()[((b * co + oc) * oh + oy as usize) * ow + ox as usize] +=
                                    v * w.data()[((ic * co + oc) * k + i) * k + j];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut r = rng(1);
    for &(c, o, h, k, s, p) in &[
        (1, 1, 5, 3, 1, 1),
        (3, 4, 8, 3, 2, 1),
        (2, 3, 9, 7, 1, 3),
        (2, 2, 8, 4, 2, 1),
        (3, 2, 7, 1, 1, 0),
    ] {
        let x = randn(&[2, c, h, h], &mut r);
        let w = randn(&[o, c, k, k], &mut r);
        let fast = kernels::conv2d(&x, &w, s, p);
        let slow = naive_conv2d(&x, &w, s, p);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-12, "c{c} o{o} k{k} s{s}");
    }
}

#[test]
fn stride_two_conv_on_delta_image_picks_kernel_taps() {
    // delta at (2,2) with 3x3 kernel, stride 2, pad 1: output (1,1) sees the kernel centre
    let mut x = Tensor::zeros(&[1, 1, 6, 6]);
    x.data_mut()[2 * 6 + 2] = 1.0;
    let w = Tensor::from_fn(&[1, 1, 3, 3], |i| i as f64 + 1.0);
    let y = kernels::conv2d(&x, &w, 2, 1);
    assert_eq!(y.shape(), &[1, 1, 3, 3]);
    assert_eq!(y.data()[3 + 1], 5.0);
    assert_eq!(y, naive_conv2d(&x, &w, 2, 1));
}

#[test]
fn conv_transpose2d_matches_scatter_oracle() {
    let mut r = rng(2);
    for &(ci, co, h, k, s, p, op) in &[
        (2, 3, 4, 3, 2, 1, 1),
        (1, 1, 3, 3, 1, 1, 0),
        (3, 2, 5, 7, 1, 3, 0),
        (2, 2, 4, 4, 2, 1, 0),
    ] {
        let x = randn(&[2, ci, h, h], &mut r);
        let w = randn(&[ci, co, k, k], &mut r);
        let fast = kernels::conv_transpose2d(&x, &w, s, p, op);
        let slow = naive_conv_transpose2d(&x, &w, s, p, op);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-12);
    }
}

#[test]
fn permute_matches_index_arithmetic() {
    let x = Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64);
    let y = kernels::permute(&x, &[2, 0, 3, 1]);
    assert_eq!(y.shape(), &[4, 2, 5, 3]);
    for a in 0..2 {
        for b in 0..3 {
            for c in 0..4 {
                for d in 0..5 {
                    let src = x.data()[((a * 3 + b) * 4 + c) * 5 + d];
                    let dst = y.data()[((c * 2 + a) * 5 + d) * 3 + b];
                    assert_eq!(src, dst);
                }
            }
        }
    }
}

fn assert_grads(report: gsp_autograd::GradCheckReport, what: &str) {
    assert!(
        report.passed(),
        "{what}: worst {:?} (rtol {})",
        report.worst(),
        report.rtol
    );
}

#[test]
fn elementwise_gradients() {
    let cfg = GradCheckConfig::default();
    for seed in 0..5 {
        let mut r = rng(100 + seed);
        let a = randn(&[2, 3, 4], &mut r);
        let b = randn(&[2, 3, 4], &mut r);
        let rep = check_inputs(&[a.clone(), b.clone()], cfg, |_, v| {
            let y = v[0].mul(v[1])?.add(v[0].tanh())?.sub(v[1].gelu())?;
            Ok(y.square().mean().add_scalar(1.0).scale(0.5))
        })
        .unwrap();
        assert_grads(rep, "mul/add/sub/tanh/gelu/square");
        let rep = check_inputs(&[a.clone()], cfg, |_, v| {
            Ok(v[0].relu().add(v[0].leaky_relu(0.2))?.add(v[0].abs())?.sum())
        })
        .unwrap();
        assert_grads(rep, "relu/leaky/abs");
        let pos = a.map(|v| v.abs() + 0.1);
        let rep = check_inputs(&[pos], cfg, |_, v| Ok(v[0].ln_clamped(1e-12).mean())).unwrap();
        assert_grads(rep, "ln");
    }
}

#[test]
fn shape_op_gradients() {
    let cfg = GradCheckConfig::default();
    for seed in 0..5 {
        let mut r = rng(200 + seed);
        let a = randn(&[2, 3, 4, 2], &mut r);
        let b = randn(&[2, 1, 4, 2], &mut r);
        let w = randn(&[2, 3, 4, 2], &mut r);
        let rep = check_inputs(&[a.clone(), b.clone(), w.clone()], cfg, |_, v| {
            let c = gsp_autograd::Var::concat(&[v[0], v[1]], 1)?;
            let n = c.narrow(1, 1, 3)?;
            let p = n.permute(&[3, 1, 0, 2])?.reshape(&[2, 3, 2, 4])?;
            let p = p.permute(&[2, 1, 3, 0])?;
            Ok(p.mul(v[2])?.sum())
        })
        .unwrap();
        assert_grads(rep, "concat/narrow/permute/reshape");
    }
}

#[test]
fn matmul_softmax_norm_gradients() {
    let cfg = GradCheckConfig::default();
    for seed in 0..5 {
        let mut r = rng(300 + seed);
        let a = randn(&[3, 4], &mut r);
        let b = randn(&[4, 5], &mut r);
        let bias = randn(&[5], &mut r);
        let gamma = randn(&[5], &mut r);
        let beta = randn(&[5], &mut r);
        let w = randn(&[3, 5], &mut r);
        let rep = check_inputs(&[a, b, bias, gamma, beta, w], cfg, |_, v| {
            let y = v[0].matmul(v[1])?.add_bias(v[2])?;
            let y = y.layer_norm(v[3], v[4], 1e-5)?.softmax();
            Ok(y.mul(v[5])?.sum())
        })
        .unwrap();
        assert_grads(rep, "matmul/bias/layer_norm/softmax");

        let q = randn(&[2, 3, 4], &mut r);
        let k = randn(&[2, 3, 4], &mut r);
        let wv = randn(&[2, 3, 3], &mut r);
        let rep = check_inputs(&[q, k, wv], cfg, |_, v| {
            let att = v[0].bmm(v[1].transpose_last()?)?.softmax();
            Ok(att.mul(v[2])?.square().sum())
        })
        .unwrap();
        assert_grads(rep, "bmm/softmax");
    }
}

#[test]
fn conv_and_instance_norm_gradients() {
    let cfg = GradCheckConfig::default();
    for seed in 0..5 {
        let mut r = rng(400 + seed);
        let x = randn(&[2, 2, 6, 6], &mut r);
        let w = randn(&[3, 2, 3, 3], &mut r);
        let wt = randn(&[3, 2, 3, 3], &mut r);
        let gamma = randn(&[3], &mut r);
        let beta = randn(&[3], &mut r);
        let bias = randn(&[2], &mut r);
        let probe = randn(&[2, 2, 8, 8], &mut r);
        let rep = check_inputs(&[x, w, wt, gamma, beta, bias, probe], cfg, |_, v| {
            let h = v[0].reflect_pad2d(1)?.conv2d(v[1], 2, 1)?;
            let h = h.instance_norm(v[3], v[4], 1e-5)?.relu();
            let y = h.conv_transpose2d(v[2], 2, 1, 1)?.add_channel_bias(v[5])?;
            Ok(y.mul(v[6])?.sum())
        })
        .unwrap();
        assert_grads(rep, "pad/conv/instance_norm/conv_transpose");
        let z = randn(&[2, 3, 4, 4], &mut r);
        let rep = check_inputs(&[z], cfg, |_, v| Ok(v[0].spatial_mean()?.square().sum())).unwrap();
        assert_grads(rep, "spatial_mean");
    }
}

#[test]
fn softmax_rows_are_stochastic() {
    let mut r = rng(5);
    let g = Graph::new();
    let x = g.constant(Tensor::randn(&[7, 9], 5.0, &mut r));
    let y = x.softmax().value();
    for row in y.data().chunks(9) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn layer_norm_standardizes_each_token() {
    let mut r = rng(6);
    let g = Graph::new();
    let x = g.constant(Tensor::randn(&[3, 4, 16], 3.0, &mut r).map(|v| v + 2.0));
    let y = x
        .layer_norm(g.constant(Tensor::ones(&[16])), g.constant(Tensor::zeros(&[16])), 0.0)
        .unwrap()
        .value();
    for tok in y.data().chunks(16) {
        let mean = tok.iter().sum::<f64>() / 16.0;
        let var = tok.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-10);
    }
}

#[test]
fn shape_errors_are_reported() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(a.add(b).is_err());
    assert!(a.matmul(a).is_err());
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(x.conv2d(w, 1, 1).is_err());
    assert!(x.reflect_pad2d(4).is_err());
}

#[test]
fn adam_first_step_moves_by_lr_times_sign() {
    // with bias correction the first step is lr * g / (|g| + eps)
    let mut params = ParamStore::new();
    params.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let grads = [("w".to_string(), Tensor::new(vec![3], vec![0.3, -4.0, 0.0]).unwrap())]
        .into_iter()
        .collect();
    let mut adam = Adam::new(AdamConfig {
        lr: 0.1,
        ..Default::default()
    });
    adam.step(&mut params, &grads).unwrap();
    let w = params.get("w").unwrap().data();
    assert!((w[0] - (1.0 - 0.1 * 0.3 / (0.3 + 1e-8))).abs() < 1e-12);
    assert!((w[1] - (-2.0 + 0.1 * 4.0 / (4.0 + 1e-8))).abs() < 1e-12);
    assert_eq!(w[2], 0.5);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn permute_then_inverse_is_identity(seed in 0u64..1000, perm in Just(vec![0usize,1,2,3]).prop_shuffle()) {
            let mut r = rng(seed);
            let x = Tensor::randn(&[2, 3, 2, 4], 1.0, &mut r);
            let y = kernels::permute(&x, &perm);
            let back = kernels::permute(&y, &kernels::inverse_axes(&perm));
            prop_assert!(back.bit_eq(&x));
        }

        #[test]
        fn conv_transpose_is_adjoint_of_conv(seed in 0u64..1000, s in 1usize..3, p in 0usize..2) {
            // <conv(x), y> == <x, conv_t(y)> for the same weight
            let mut r = rng(seed);
            let x = Tensor::randn(&[1, 2, 6, 6], 1.0, &mut r);
            let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
            let cx = kernels::conv2d(&x, &w, s, p);
            let y = Tensor::randn(cx.shape(), 1.0, &mut r);
            let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
            let op = (6 + 2 * p - 3) % s;
            let ty = kernels::conv_transpose2d(&y, &w, s, p, op);
            prop_assert_eq!(ty.shape(), x.shape());
            let rhs: f64 = x.data().iter().zip(ty.data()).map(|(a, b)| a * b).sum();
            prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
