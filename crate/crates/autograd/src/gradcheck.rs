//! Central finite-difference checks of analytic gradients.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Maximum tolerated relative error per tensor.
    pub rtol: f64,
    /// Coordinates probed per tensor; larger tensors are subsampled evenly.
    pub max_coords: usize,
    /// Gradient norm below which errors are measured absolutely; covers
    /// gradients that vanish analytically but pick up rounding noise.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rtol: 1e-3,
            max_coords: 24,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2, floor)` over the probed coordinates.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub rtol: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().fold(0.0, |m, t| m.max(t.rel_error))
    }

    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.rel_error <= self.rtol)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn probe_coords(n: usize, max: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    // evenly spaced, offset so the first and last entries are not always the same ones
    (0..max).map(|i| (i * n + n / (2 * max)) / max).collect()
}

fn rel_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

fn numeric(
    base: &Tensor,
    coords: &[usize],
    step: f64,
    mut eval: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(coords.len());
    let mut t = base.clone();
    for &c in coords {
        let orig = t.data()[c];
        t.data_mut()[c] = orig + step;
        let plus = eval(&t)?;
        t.data_mut()[c] = orig - step;
        let minus = eval(&t)?;
        t.data_mut()[c] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Ok(out)
}

/// Checks d f / d inputs for a scalar-valued `f`.
pub fn check_inputs<F>(inputs: &[Tensor], cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.constant(x.clone())).collect();
        Ok(f(&g, &vars)?.value().item())
    };
    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|x| g.leaf(x.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss);
    let mut report = GradCheckReport {
        tensors: Vec::new(),
        rtol: cfg.rtol,
    };
    for (i, (x, v)) in inputs.iter().zip(&vars).enumerate() {
        let analytic = grads.get_or_zeros(*v);
        let coords = probe_coords(x.numel(), cfg.max_coords);
        let mut xs = inputs.to_vec();
        let num = numeric(x, &coords, cfg.step, |t| {
            xs[i] = t.clone();
            eval(&xs)
        })?;
        let ana: Vec<f64> = coords.iter().map(|&c| analytic.data()[c]).collect();
        report.tensors.push(TensorCheck {
            name: format!("input{i}"),
            coords: coords.len(),
            rel_error: rel_error(&ana, &num, cfg.floor),
            analytic_norm: analytic.norm(),
        });
    }
    Ok(report)
}

/// Checks d f / d params for every parameter bound by `f`.
pub fn check_params<F>(params: &ParamStore, cfg: GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: for<'s> Fn(&'s Session<'_>) -> Result<Var<'s>>,
{
    let eval = |p: &ParamStore| -> Result<f64> {
        let s = Session::new(p);
        let out = f(&s)?.value().item();
        Ok(out)
    };
    let analytic: BTreeMap<String, Tensor> = {
        let s = Session::new(params);
        let loss = f(&s)?;
        let grads = s.backward(loss);
        s.param_grads(&grads)
    };
    let mut report = GradCheckReport {
        tensors: Vec::new(),
        rtol: cfg.rtol,
    };
    for (name, ana_t) in &analytic {
        let base = params.get(name).expect("bound parameter exists");
        let coords = probe_coords(base.numel(), cfg.max_coords);
        let mut p = params.clone();
        let num = numeric(base, &coords, cfg.step, |t| {
            *p.get_mut(name).unwrap() = t.clone();
            eval(&p)
        })?;
        let ana: Vec<f64> = coords.iter().map(|&c| ana_t.data()[c]).collect();
        report.tensors.push(TensorCheck {
            name: name.clone(),
            coords: coords.len(),
            rel_error: rel_error(&ana, &num, cfg.floor),
            analytic_norm: ana_t.norm(),
        });
    }
    Ok(report)
}
