use gsp_autograd::ParamStore;
use serde::Serialize;

use super::Classifier;
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TransferReport {
    /// Encoder and ART tensors copied from the source.
    pub transferred: Vec<String>,
    /// Source decoder and discriminator tensors left behind.
    pub skipped: Vec<String>,
    /// Destination tensors kept at their fresh initialization.
    pub fresh: Vec<String>,
}

fn is_shared(name: &str) -> bool {
    name.starts_with("encoder.") || name.starts_with("art.")
}

/// Copies every `encoder.*` and `art.*` tensor of `src` into `dst`.
///
/// All-or-nothing: a missing, extra or shape-mismatched shared tensor is an
/// error and leaves `dst` untouched.
pub fn transfer_weights(src: &ParamStore, dst: &mut Classifier) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let mut missing = Vec::new();
    for (name, t) in dst.params.iter() {
        if !is_shared(name) {
            report.fresh.push(name.clone());
            continue;
        }
        match src.get(name) {
            None => missing.push(name.clone()),
            Some(s) if s.shape() != t.shape() => {
                return Err(Error::config(format!(
                    "transfer: {name} has shape {:?} in the source, {:?} in the classifier",
                    s.shape(),
                    t.shape()
                )))
            }
            Some(_) => report.transferred.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(Error::config(format!(
            "transfer: source lacks {}",
            missing.join(", ")
        )));
    }
    for name in src.names() {
        if is_shared(name) && !dst.params.contains(name) {
            return Err(Error::config(format!(
                "transfer: source tensor {name} has no counterpart in the classifier"
            )));
        }
        if name.starts_with("decoder.") || name.starts_with("disc.") {
            report.skipped.push(name.clone());
        }
    }
    for name in &report.transferred {
        *dst.params.get_mut(name).expect("checked above") = src.get(name).expect("checked above").clone();
    }
    Ok(report)
}
