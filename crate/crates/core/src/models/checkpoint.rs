//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "GSPCKPT\0" | version u32 | manifest_len u64 | manifest JSON
//! count u32 | count x (name_len u32, name, dtype u8, ndim u32, dims u64.., data)
//! sha256 of everything above (32 bytes)
//! ```
//!
//! dtype 1 is float32, 2 is float64. Tensors are written as float64.

use std::fs;
use std::path::Path;

use gsp_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GSPCKPT\0";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const DTYPE_F64: u8 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Generator and discriminator, with optimizer state.
    Pretrain,
    /// Classifier, with optimizer state.
    Classifier,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub kind: CheckpointKind,
    pub config: serde_json::Value,
    pub step: u64,
    pub seed: u64,
    pub config_digest: String,
    /// Digest of the recorded loss history up to `step`.
    pub loss_digest: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub tensors: ParamStore,
}

impl Checkpoint {
    /// Tensors whose names start with `prefix`, with the prefix kept.
    pub fn group(&self, prefix: &str) -> ParamStore {
        self.tensors
            .with_prefix(prefix)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let manifest = serde_json::to_vec(&ckpt.manifest)
        .map_err(|e| Error::checkpoint("manifest", e.to_string()))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    buf.extend_from_slice(&manifest);
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for (name, t) in ckpt.tensors.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(DTYPE_F64);
        buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::checkpoint(
                section,
                format!("truncated: needs {n} bytes at offset {}", self.pos),
            ));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, section: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().unwrap()))
    }

    fn u64(&mut self, section: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(Error::checkpoint("header", "file too short"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8, "header")? != MAGIC {
        return Err(Error::checkpoint("header", "bad magic"));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::checkpoint("header", format!("unsupported version {version}")));
    }
    if Sha256::digest(body).as_slice() != sum {
        return Err(Error::checkpoint("checksum", "content does not match stored sha256"));
    }
    let mlen = r.u64("manifest")? as usize;
    let manifest: CheckpointManifest = serde_json::from_slice(r.take(mlen, "manifest")?)
        .map_err(|e| Error::checkpoint("manifest", e.to_string()))?;
    let count = r.u32("tensors")?;
    let mut tensors = ParamStore::new();
    for i in 0..count {
        let section = format!("tensor #{i}");
        let nlen = r.u32(&section)? as usize;
        let name = std::str::from_utf8(r.take(nlen, &section)?)
            .map_err(|_| Error::checkpoint(&section, "name is not UTF-8"))?
            .to_string();
        let section = format!("tensor '{name}'");
        let dtype = r.take(1, &section)?[0];
        let ndim = r.u32(&section)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64(&section)? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::checkpoint(&section, "shape overflows"))?;
        let data: Vec<f64> = match dtype {
            DTYPE_F64 => r
                .take(numel.saturating_mul(8), &section)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DTYPE_F32 => r
                .take(numel.saturating_mul(4), &section)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            other => return Err(Error::checkpoint(&section, format!("unknown dtype {other}"))),
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::checkpoint(&section, e.to_string()))?;
        if tensors.insert(name, t).is_some() {
            return Err(Error::checkpoint(&section, "duplicate name"));
        }
    }
    if r.pos != body.len() {
        return Err(Error::checkpoint(
            "tensors",
            format!("{} trailing bytes", body.len() - r.pos),
        ));
    }
    Ok(Checkpoint { manifest, tensors })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
