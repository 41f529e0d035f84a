use std::path::Path;

use gsp_autograd::{Session, Tensor};
use serde::Serialize;

use super::Generator;
use crate::data::io::{write_f32_file, write_json};
use crate::error::Result;
use crate::nn::{decoder_forward, encoder_forward};

/// One record of `index.json`: where an activation lives in `activations.f32`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActivationEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset and length in float32 values.
    pub offset: usize,
    pub len: usize,
}

/// Writes the encoder, every ART slot and the decoder output for input `x`
/// to `dir/index.json` and `dir/activations.f32`.
pub fn dump_activations(generator: &Generator, x: &Tensor, dir: &Path) -> Result<Vec<ActivationEntry>> {
    let cfg = &generator.config;
    let s = Session::new(&generator.params);
    let mut stages: Vec<(String, Tensor)> = Vec::new();
    let mut f = encoder_forward(&s, cfg, s.input(x.clone()))?;
    stages.push(("encoder".into(), f.value().as_ref().clone()));
    for block in cfg.art_blocks() {
        f = block.forward(&s, f, None)?;
        stages.push((block.prefix(), f.value().as_ref().clone()));
    }
    let out = decoder_forward(&s, cfg, f)?;
    stages.push(("decoder".into(), out.value().as_ref().clone()));

    let mut index = Vec::new();
    let mut blob: Vec<f32> = Vec::new();
    for (name, t) in stages {
        index.push(ActivationEntry {
            name,
            shape: t.shape().to_vec(),
            offset: blob.len(),
            len: t.numel(),
        });
        blob.extend(t.data().iter().map(|&v| v as f32));
    }
    write_f32_file(&dir.join("activations.f32"), blob.iter())?;
    write_json(&dir.join("index.json"), &index)?;
    Ok(index)
}
