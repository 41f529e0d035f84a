//! Unified multi-sequence masking, synthesis losses, least-squares
//! adversarial losses and the classifier cross-entropy.
//!
//! Image stacks are `(N, I, H, W)` with one channel per participating
//! sequence.

use gsp_autograd::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CE_EPS: f64 = 1e-12;

/// `a_i = 1` marks sequence `i` as a generator input, `0` as a target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AvailabilityMask {
    a: Vec<bool>,
}

impl AvailabilityMask {
    pub fn new(a: Vec<bool>) -> Result<Self> {
        if !a.iter().any(|&x| x) || a.iter().all(|&x| x) {
            return Err(Error::config(
                "availability mask needs at least one source and one target",
            ));
        }
        Ok(Self { a })
    }

    /// Like [`AvailabilityMask::new`] without the source/target requirement.
    pub fn unchecked(a: Vec<bool>) -> Self {
        Self { a }
    }

    pub fn len(&self) -> usize {
        self.a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a.is_empty()
    }

    pub fn is_source(&self, i: usize) -> bool {
        self.a[i]
    }

    pub fn sources(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.a.len()).filter(|&i| self.a[i])
    }

    pub fn targets(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.a.len()).filter(|&i| !self.a[i])
    }

    /// Swaps sources and targets.
    pub fn complement(&self) -> Self {
        Self {
            a: self.a.iter().map(|&x| !x).collect(),
        }
    }
}

fn stack_dims(op: &str, shape: &[usize], mask: &AvailabilityMask) -> Result<[usize; 4]> {
    let d: [usize; 4] = shape
        .try_into()
        .map_err(|_| Error::config(format!("{op}: expected (N,I,H,W), got {shape:?}")))?;
    if d[1] != mask.len() {
        return Err(Error::config(format!(
            "{op}: {} sequences but mask has {}",
            d[1],
            mask.len()
        )));
    }
    Ok(d)
}

/// `X^G`: channel `i` of `m` where `a_i = 1`, zeros elsewhere.
pub fn masked_input(m: &Tensor, mask: &AvailabilityMask) -> Result<Tensor> {
    let [_, i_count, h, w] = stack_dims("masked_input", m.shape(), mask)?;
    let plane = h * w;
    let mut out = m.clone();
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        if !mask.is_source((k / plane) % i_count) {
            *v = 0.0;
        }
    }
    Ok(out)
}

fn channel_l1<'g>(
    op: &str,
    pred: Var<'g>,
    m: Var<'g>,
    mask: &AvailabilityMask,
    channels: impl Iterator<Item = usize>,
) -> Result<Var<'g>> {
    let dp = stack_dims(op, &pred.shape(), mask)?;
    let dm = stack_dims(op, &m.shape(), mask)?;
    if dp != dm {
        return Err(Error::config(format!("{op}: pred {dp:?} vs reference {dm:?}")));
    }
    let mut total: Option<Var<'g>> = None;
    for i in channels {
        let term = pred.narrow(1, i, 1)?.sub(m.narrow(1, i, 1)?)?.abs().mean();
        total = Some(match total {
            None => term,
            Some(t) => t.add(term)?,
        });
    }
    Ok(total.unwrap_or_else(|| pred.graph().constant(Tensor::scalar(0.0))))
}

/// Mean absolute error summed over target sequences (`a_i = 0`).
pub fn l_pix<'g>(pred: Var<'g>, m: Var<'g>, mask: &AvailabilityMask) -> Result<Var<'g>> {
    channel_l1("l_pix", pred, m, mask, mask.targets())
}

/// Mean absolute error summed over source sequences (`a_i = 1`).
pub fn l_rec<'g>(pred: Var<'g>, m: Var<'g>, mask: &AvailabilityMask) -> Result<Var<'g>> {
    channel_l1("l_rec", pred, m, mask, mask.sources())
}

/// Discriminator objective `E[(D(real) - 1)^2] + E[D(fake)^2]`.
pub fn lsgan_d_loss<'g>(d_real: Var<'g>, d_fake: Var<'g>) -> Result<Var<'g>> {
    if d_real.shape() != d_fake.shape() {
        return Err(Error::config(format!(
            "adversarial loss: real scores {:?} vs fake scores {:?}",
            d_real.shape(),
            d_fake.shape()
        )));
    }
    let real = d_real.add_scalar(-1.0).square().mean();
    let fake = d_fake.square().mean();
    Ok(real.add(fake)?)
}

/// Generator objective `E[(D(fake) - 1)^2]`.
pub fn lsgan_g_loss<'g>(d_fake: Var<'g>) -> Var<'g> {
    d_fake.add_scalar(-1.0).square().mean()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub pix: f64,
    pub rec: f64,
    pub adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            pix: 100.0,
            rec: 100.0,
            adv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.pix, self.rec, self.adv];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and nonnegative, got {w:?}")));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::config("loss weights are all zero"));
        }
        Ok(())
    }
}

/// `pix * l_pix + rec * l_rec + adv * l_adv`.
pub fn total_generator_loss(l_pix: f64, l_rec: f64, l_adv: f64, w: &LossWeights) -> Result<f64> {
    if [l_pix, l_rec, l_adv].iter().any(|v| v.is_nan()) {
        return Err(Error::Numeric(format!(
            "generator loss component is NaN (pix {l_pix}, rec {l_rec}, adv {l_adv})"
        )));
    }
    Ok(w.pix * l_pix + w.rec * l_rec + w.adv * l_adv)
}

/// Differentiable counterpart of [`total_generator_loss`]; terms with zero
/// weight are left out of the graph.
pub fn total_generator_loss_var<'g>(
    l_pix: Var<'g>,
    l_rec: Var<'g>,
    l_adv: Option<Var<'g>>,
    w: &LossWeights,
) -> Result<Var<'g>> {
    let mut total = l_pix.scale(w.pix).add(l_rec.scale(w.rec))?;
    if let Some(adv) = l_adv {
        if w.adv != 0.0 {
            total = total.add(adv.scale(w.adv))?;
        }
    }
    Ok(total)
}

/// Mean of `-ln max(p_true, 1e-12)` over the rows of `probs`.
pub fn cross_entropy<'g>(probs: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::config(format!(
            "cross_entropy: probabilities {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let (n, k) = (shape[0], shape[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::data(format!("label {bad} outside {k} classes")));
    }
    let p = probs.value();
    let clamped = labels
        .iter()
        .enumerate()
        .filter(|&(r, &l)| p.data()[r * k + l] < CE_EPS)
        .count();
    if clamped > 0 {
        log::warn!("cross_entropy: {clamped} true-class probabilities clamped to {CE_EPS}");
    }
    let onehot = Tensor::from_fn(&[n, k], |i| if labels[i / k] == i % k { 1.0 } else { 0.0 });
    let picked = probs.ln_clamped(CE_EPS).mul(probs.graph().constant(onehot))?;
    Ok(picked.sum().scale(-1.0 / n as f64))
}
