//! Shared fixtures and independent reference implementations.
#![allow(dead_code)]

use gsp_autograd::{GradCheckConfig, GradCheckReport, ParamStore, Session, Tensor, Var};
use gsp_core::nn::ParamShapes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Well-conditioned random parameters: weights N(0, 0.5), gains near one.
pub fn random_params(shapes: &ParamShapes, seed: u64) -> ParamStore {
    let mut r = rng(seed);
    shapes
        .iter()
        .map(|(name, shape)| {
            let t = if name.ends_with("gamma") {
                Tensor::randn(shape, 0.1, &mut r).map(|v| v + 1.0)
            } else if name.ends_with("beta") || name.ends_with("bias") {
                Tensor::randn(shape, 0.1, &mut r)
            } else {
                Tensor::randn(shape, 0.5, &mut r)
            };
            (name.clone(), t)
        })
        .collect()
}

/// `sum(y * probe)` with a seeded probe, so every output coordinate matters.
pub fn probe<'s>(s: &'s Session<'_>, y: Var<'s>, seed: u64) -> Var<'s> {
    let p = Tensor::randn(&y.shape(), 1.0, &mut rng(seed ^ 0x5eed));
    y.mul(s.input(p)).expect("probe shape").sum()
}

pub fn gradcheck() -> GradCheckConfig {
    GradCheckConfig {
        rtol: 1e-3,
        ..GradCheckConfig::default()
    }
}

pub fn assert_report(report: &GradCheckReport, what: &str) {
    assert!(
        report.passed(),
        "{what}: worst {:?} (rtol {})",
        report.worst(),
        report.rtol
    );
}

pub fn idx4(shape: &[usize], n: usize, c: usize, y: usize, x: usize) -> usize {
    ((n * shape[1] + c) * shape[2] + y) * shape[3] + x
}

/// `x + W2 relu(W1 x)` pixel by pixel, for a residual block with 1x1
/// kernels and no normalization.
pub fn residual_1x1(x: &Tensor, w1: &Tensor, w2: &Tensor) -> Tensor {
    let s = x.shape().to_vec();
    let c = s[1];
    let mut out = x.clone();
    for n in 0..s[0] {
        for y in 0..s[2] {
            for xx in 0..s[3] {
                let v: Vec<f64> = (0..c).map(|ci| x.data()[idx4(&s, n, ci, y, xx)]).collect();
                let h: Vec<f64> = (0..c)
                    .map(|o| (0..c).map(|i| w1.data()[o * c + i] * v[i]).sum::<f64>().max(0.0))
                    .collect();
                for o in 0..c {
                    let f: f64 = (0..c).map(|i| w2.data()[o * c + i] * h[i]).sum();
                    out.data_mut()[idx4(&s, n, o, y, xx)] += f;
                }
            }
        }
    }
    out
}

pub fn matvec_rows(x: &[Vec<f64>], w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (inp, out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b.data()[j] + (0..inp).map(|i| row[i] * w.data()[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn softmax_row(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Multi-head self-attention on one sequence of tokens, written out head
/// by head with explicit loops.
pub fn attention_loops(tokens: &[Vec<f64>], p: &ParamStore, prefix: &str, heads: usize) -> Vec<Vec<f64>> {
    let get = |n: &str| p.get(&format!("{prefix}.{n}")).unwrap();
    let q = matvec_rows(tokens, get("q.weight"), get("q.bias"));
    let k = matvec_rows(tokens, get("k.weight"), get("k.bias"));
    let v = matvec_rows(tokens, get("v.weight"), get("v.bias"));
    let nd = tokens[0].len();
    let dh = nd / heads;
    let np = tokens.len();
    let mut mixed = vec![vec![0.0; nd]; np];
    for h in 0..heads {
        for i in 0..np {
            let scores: Vec<f64> = (0..np)
                .map(|j| (0..dh).map(|d| q[i][h * dh + d] * k[j][h * dh + d]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let a = softmax_row(&scores);
            for d in 0..dh {
                mixed[i][h * dh + d] = (0..np).map(|j| a[j] * v[j][h * dh + d]).sum();
            }
        }
    }
    matvec_rows(&mixed, get("o.weight"), get("o.bias"))
}

/// Channel-major flattening of non-overlapping `p x p` patches, row-major
/// over the patch grid.
pub fn patches(x: &Tensor, n: usize, p: usize) -> Vec<Vec<f64>> {
    let s = x.shape().to_vec();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Vec::new();
    for gy in 0..h / p {
        for gx in 0..w / p {
            let mut v = Vec::new();
            for ci in 0..c {
                for i in 0..p {
                    for j in 0..p {
                        v.push(x.data()[idx4(&s, n, ci, gy * p + i, gx * p + j)]);
                    }
                }
            }
            out.push(v);
        }
    }
    out
}

/// Mean absolute difference of the listed channels, summed over channels.
pub fn channel_l1_loops(pred: &Tensor, m: &Tensor, channels: &[usize]) -> f64 {
    let s = pred.shape().to_vec();
    let mut total = 0.0;
    for &c in channels {
        let mut acc = 0.0;
        for n in 0..s[0] {
            for y in 0..s[2] {
                for x in 0..s[3] {
                    let i = idx4(&s, n, c, y, x);
                    acc += (pred.data()[i] - m.data()[i]).abs();
                }
            }
        }
        total += acc / (s[0] * s[2] * s[3]) as f64;
    }
    total
}

pub fn lsgan_d_loops(real: &[f64], fake: &[f64]) -> f64 {
    let r: f64 = real.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / real.len() as f64;
    let f: f64 = fake.iter().map(|v| v * v).sum::<f64>() / fake.len() as f64;
    r + f
}

pub fn lsgan_g_loops(fake: &[f64]) -> f64 {
    fake.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>() / fake.len() as f64
}

pub fn cross_entropy_loops(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    -probs
        .iter()
        .zip(labels)
        .map(|(row, &l)| row[l].max(1e-12).ln())
        .sum::<f64>()
        / n
}

/// SSIM evaluated window by window with the full 2-d Gaussian weights,
/// without separable filtering.
pub fn ssim_windows(a: &[Vec<f64>], b: &[Vec<f64>], range: f64) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let c = 5.0f64;
    let mut w2 = vec![vec![0.0; k]; k];
    let mut total_w = 0.0;
    for i in 0..k {
        for j in 0..k {
            let r2 = (i as f64 - c).powi(2) + (j as f64 - c).powi(2);
            w2[i][j] = (-r2 / (2.0 * sigma * sigma)).exp();
            total_w += w2[i][j];
        }
    }
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let (h, w) = (a.len(), a[0].len());
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..=h - k {
        for x in 0..=w - k {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = w2[i][j] / total_w;
                    ma += wt * a[y + i][x + j];
                    mb += wt * b[y + i][x + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = w2[i][j] / total_w;
                    let da = a[y + i][x + j] - ma;
                    let db = b[y + i][x + j] - mb;
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

pub struct Weighted {
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Support-weighted metrics counted pair by pair for each class.
pub fn weighted_brute(y_true: &[usize], y_pred: &[usize], k: usize) -> Weighted {
    let mut confusion = vec![vec![0; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        confusion[t][p] += 1;
    }
    let n = y_true.len() as f64;
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = y_true.iter().zip(y_pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let fp = y_true.iter().zip(y_pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
        let fnn = y_true.iter().zip(y_pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
        let support = tp + fnn;
        let prec = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let rec = if support > 0.0 { tp / support } else { 0.0 };
        let f1 = if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 };
        wp += support * prec;
        wr += support * rec;
        wf += support * f1;
    }
    let correct = y_true.iter().zip(y_pred).filter(|(t, p)| t == p).count() as f64;
    Weighted {
        confusion,
        accuracy: correct / n,
        precision: wp / n,
        recall: wr / n,
        f1: wf / n,
    }
}

/// Repeated selection of the best remaining candidate.
pub fn select_by<F: Fn(usize) -> bool, K: Ord, G: Fn(usize) -> K>(len: usize, k: usize, eligible: F, key: G) -> Vec<usize> {
    let mut left: Vec<usize> = (0..len).filter(|&z| eligible(z)).collect();
    let mut out = Vec::new();
    while out.len() < k && !left.is_empty() {
        let mut best = 0;
        for i in 1..left.len() {
            if key(left[i]) < key(left[best]) {
                best = i;
            }
        }
        out.push(left.remove(best));
    }
    out
}

pub fn random_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(0..k)).collect()
}

/// Independent timing and pass/fail line for acceptance runs.
pub struct Outcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}
pub mod grad;
pub mod fixtures;
