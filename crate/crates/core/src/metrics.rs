//! Synthesis quality (MSE, PSNR, SSIM) and weighted classification metrics.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(op: &str, a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Metric(format!("{op}: shapes {:?} and {:?} differ", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::Metric(format!("{op}: empty images")));
    }
    Ok(())
}

/// Maps `[-1, 1]` to `[0, 1]`.
pub fn to_unit_range(a: ArrayView2<f32>) -> Array2<f64> {
    a.mapv(|v| (v as f64 + 1.0) / 2.0)
}

pub fn mse(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    same_shape("mse", &a, &b)?;
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.len() as f64)
}

/// `10 log10(max_val^2 / mse)`; identical images are an error, not infinity.
pub fn psnr(a: ArrayView2<f64>, b: ArrayView2<f64>, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(Error::Metric(format!("psnr: max_val must be positive, got {max_val}")));
    }
    let e = mse(a, b)?;
    if e == 0.0 {
        return Err(Error::Metric("psnr: identical images".into()));
    }
    Ok(10.0 * (max_val * max_val / e).log10())
}

fn gaussian_window() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over valid window positions.
fn filter_valid(x: &Array2<f64>, g: &[f64]) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let rows: Array2<f64> = Array2::from_shape_fn((h, ow), |(i, j)| (0..k).map(|t| g[t] * x[[i, j + t]]).sum());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..k).map(|t| g[t] * rows[[i + t, j]]).sum::<f64>())
}

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5) for images
/// with dynamic range `data_range`.
pub fn ssim(a: ArrayView2<f64>, b: ArrayView2<f64>, data_range: f64) -> Result<f64> {
    same_shape("ssim", &a, &b)?;
    let (h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Metric(format!(
            "ssim: {h}x{w} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let g = gaussian_window();
    let (a, b) = (a.to_owned(), b.to_owned());
    let mu_a = filter_valid(&a, &g);
    let mu_b = filter_valid(&b, &g);
    let e_aa = filter_valid(&(&a * &a), &g);
    let e_bb = filter_valid(&(&b * &b), &g);
    let e_ab = filter_valid(&(&a * &b), &g);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for (((((&ma, &mb), &aa), &bb), &ab), _) in mu_a
        .iter()
        .zip(&mu_b)
        .zip(&e_aa)
        .zip(&e_bb)
        .zip(&e_ab)
        .zip(0..)
    {
        let va = aa - ma * ma;
        let vb = bb - mb * mb;
        let cov = ab - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Arithmetic mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Metric("aggregate: no values".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    fn of(values: &[f64]) -> Result<Self> {
        let (mean, std) = aggregate(values)?;
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthesisReport {
    pub task: String,
    pub max_val: f64,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mse: Vec<f64>,
    pub psnr_summary: MeanStd,
    pub ssim_summary: MeanStd,
    pub mse_summary: MeanStd,
}

impl SynthesisReport {
    /// Scores `(synthetic, reference)` pairs given in `[-1, 1]`, after
    /// mapping both to `[0, 1]`.
    pub fn from_pairs<'a>(
        task: impl Into<String>,
        pairs: impl IntoIterator<Item = (ArrayView2<'a, f32>, ArrayView2<'a, f32>)>,
        max_val: f64,
    ) -> Result<Self> {
        let (mut p, mut s, mut m) = (Vec::new(), Vec::new(), Vec::new());
        for (syn, real) in pairs {
            let (a, b) = (to_unit_range(syn), to_unit_range(real));
            m.push(mse(a.view(), b.view())?);
            p.push(psnr(a.view(), b.view(), max_val)?);
            s.push(ssim(a.view(), b.view(), max_val)?);
        }
        Ok(Self {
            task: task.into(),
            max_val,
            psnr_summary: MeanStd::of(&p)?,
            ssim_summary: MeanStd::of(&s)?,
            mse_summary: MeanStd::of(&m)?,
            psnr: p,
            ssim: s,
            mse: m,
        })
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,psnr,ssim,mse\n");
        for i in 0..self.psnr.len() {
            out.push_str(&format!("{i},{},{},{}\n", self.psnr[i], self.ssim[i], self.mse[i]));
        }
        out
    }

    /// One row per task with mean and std columns for each metric.
    pub fn to_table(&self) -> String {
        let f = |m: &MeanStd, d: usize| format!("{:.d$} ± {:.d$}", m.mean, m.std);
        format!(
            "{:<14}| {:<18}| {:<18}| {:<18}\n{}\n{:<14}| {:<18}| {:<18}| {:<18}\n",
            "Task",
            "PSNR",
            "SSIM",
            "MSE",
            "-".repeat(74),
            self.task,
            f(&self.psnr_summary, 3),
            f(&self.ssim_summary, 3),
            f(&self.mse_summary, 4),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: usize, den: usize, what: &str, class: usize) -> f64 {
    if den == 0 {
        log::warn!("class {class}: {what} undefined (zero denominator), counted as 0");
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Confusion matrix, accuracy and support-weighted precision, recall and F1.
pub fn classification_report(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ClassificationReport> {
    if y_true.is_empty() {
        return Err(Error::Metric("classification_report: no samples".into()));
    }
    if y_true.len() != y_pred.len() {
        return Err(Error::Metric(format!(
            "classification_report: {} labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut confusion = vec![vec![0usize; k]; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if t >= k || p >= k {
            return Err(Error::Metric(format!("label pair ({t}, {p}) outside {k} classes")));
        }
        confusion[t][p] += 1;
    }
    let n = y_true.len();
    let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(k);
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..k).map(|r| confusion[r][c]).sum();
        if support == 0 {
            per_class.push(ClassMetrics {
                precision: if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 },
                recall: 0.0,
                f1: 0.0,
                support,
            });
            continue;
        }
        let precision = ratio(tp, predicted, "precision", c);
        let recall = ratio(tp, support, "recall", c);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let wgt = support as f64 / n as f64;
        wp += wgt * precision;
        wr += wgt * recall;
        wf += wgt * f1;
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
        });
    }
    Ok(ClassificationReport {
        confusion,
        accuracy: correct as f64 / n as f64,
        precision: wp,
        recall: wr,
        f1: wf,
        per_class,
    })
}

impl ClassificationReport {
    /// Weighted metrics in percent, one row.
    pub fn to_table(&self, label: &str) -> String {
        format!(
            "{:<18}| {:>7}| {:>10}| {:>7}| {:>7}\n{}\n{:<18}| {:>7.2}| {:>10.2}| {:>7.2}| {:>7.2}\n",
            "Model",
            "acc",
            "precision",
            "recall",
            "F1",
            "-".repeat(58),
            label,
            100.0 * self.accuracy,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1
        )
    }

    pub fn to_csv(&self) -> String {
        format!(
            "accuracy,precision,recall,f1\n{},{},{},{}\n",
            self.accuracy, self.precision, self.recall, self.f1
        )
    }
}
