use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .ok_or_else(|| TensorError::invalid("adam", format!("no parameter '{name}'")))?;
            if p.shape() != g.shape() {
                return Err(TensorError::shape(
                    "adam",
                    format!("{name} {:?}", p.shape()),
                    format!("{:?}", g.shape()),
                ));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Moment buffers as `(prefix.m.<name>, prefix.v.<name>)` tensors.
    pub fn export_state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .m
            .iter()
            .map(|(k, t)| (format!("{prefix}.m.{k}"), t.clone()))
            .collect();
        out.extend(
            self.v
                .iter()
                .map(|(k, t)| (format!("{prefix}.v.{k}"), t.clone())),
        );
        out
    }

    /// Restores a state written by [`Adam::export_state`].
    pub fn import_state<'a>(
        config: AdamConfig,
        step: u64,
        prefix: &str,
        tensors: impl IntoIterator<Item = (&'a String, &'a Tensor)>,
    ) -> Self {
        let mut adam = Adam::new(config);
        adam.step = step;
        let mp = format!("{prefix}.m.");
        let vp = format!("{prefix}.v.");
        for (k, t) in tensors {
            if let Some(name) = k.strip_prefix(&mp) {
                adam.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix(&vp) {
                adam.v.insert(name.to_string(), t.clone());
            }
        }
        adam
    }
}
