//! On-disk formats: raw float32 volume containers with JSON sidecars,
//! float32 slice containers, JSON manifests and PNG previews.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ShapeBuilder};
use serde::{Deserialize, Serialize};

use super::{ClassLabel, DatasetManifest, Provenance, Sequence, SliceRecord, Split, VolumeRecord};
use crate::error::{Error, Result};

/// JSON sidecar describing a `<stem>.raw` voxel file next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSidecar {
    pub case_id: String,
    pub sequence: Sequence,
    pub shape: [usize; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg_path: Option<String>,
    pub class_label: ClassLabel,
}

pub fn read_f32_file(path: &Path) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::data(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_f32_file<'a>(path: &Path, values: impl IntoIterator<Item = &'a f32>) -> Result<()> {
    let bytes: Vec<u8> = values.into_iter().flat_map(|v| v.to_le_bytes()).collect();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn volume_from_raw(path: &Path, shape: [usize; 3]) -> Result<Array3<f32>> {
    let data = read_f32_file(path)?;
    let expect = shape.iter().product::<usize>();
    if data.len() != expect {
        return Err(Error::data(format!(
            "{}: {} values, shape {:?} needs {expect}",
            path.display(),
            data.len(),
            shape
        )));
    }
    Array3::from_shape_vec((shape[0], shape[1], shape[2]).f(), data)
        .map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn fortran_values(a: &Array3<f32>) -> Vec<f32> {
    a.t().iter().copied().collect()
}

/// Reads a volume given the path of its JSON sidecar.
pub fn read_volume(sidecar_path: &Path) -> Result<VolumeRecord> {
    let meta: VolumeSidecar = read_json(sidecar_path)?;
    let dir = sidecar_path.parent().unwrap_or(Path::new("."));
    let raw = sidecar_path.with_extension("raw");
    let voxels = volume_from_raw(&raw, meta.shape)?;
    let seg = match &meta.seg_path {
        None => None,
        Some(rel) => {
            let path = dir.join(rel);
            let values = volume_from_raw(&path, meta.shape)?;
            let mut labels = Array3::zeros(values.raw_dim());
            for (dst, &v) in labels.iter_mut().zip(values.iter()) {
                if !(v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f32) {
                    return Err(Error::data(format!(
                        "{}: segmentation value {v} is not a nonnegative integer",
                        path.display()
                    )));
                }
                *dst = v as u32;
            }
            Some(labels)
        }
    };
    VolumeRecord::new(meta.case_id, meta.sequence, voxels, seg, meta.class_label)
}

/// Writes `<dir>/<stem>.raw`, `<dir>/<stem>.json` and, when present,
/// `<dir>/<stem>_seg.raw`. Returns the sidecar path.
pub fn write_volume(dir: &Path, stem: &str, volume: &VolumeRecord) -> Result<PathBuf> {
    let (x, y, z) = volume.voxels.dim();
    write_f32_file(&dir.join(format!("{stem}.raw")), &fortran_values(&volume.voxels))?;
    let seg_path = match &volume.seg {
        None => None,
        Some(seg) => {
            let name = format!("{stem}_seg.raw");
            let values: Vec<f32> = seg.t().iter().map(|&v| v as f32).collect();
            write_f32_file(&dir.join(&name), &values)?;
            Some(name)
        }
    };
    let sidecar = VolumeSidecar {
        case_id: volume.case_id.clone(),
        sequence: volume.sequence,
        shape: [x, y, z],
        seg_path,
        class_label: volume.class_label,
    };
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &sidecar)?;
    Ok(path)
}

/// All volume sidecars (`*.json`) directly under `dir`, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

pub fn read_slice(path: &Path, size: usize) -> Result<Array2<f32>> {
    let data = read_f32_file(path)?;
    if data.len() != size * size {
        return Err(Error::data(format!(
            "{}: {} values, expected {size}x{size}",
            path.display(),
            data.len()
        )));
    }
    Ok(Array2::from_shape_vec((size, size), data).expect("length checked"))
}

pub fn write_slice(path: &Path, pixels: &Array2<f32>) -> Result<()> {
    write_f32_file(path, pixels.iter())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordEntry {
    path: String,
    case_id: String,
    sequence: Sequence,
    class_label: ClassLabel,
    provenance: Provenance,
    slice_index: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestFile {
    name: String,
    split: Split,
    image_size: usize,
    per_class_counts: BTreeMap<ClassLabel, usize>,
    records: Vec<RecordEntry>,
}

/// Writes each record to `<dir>/<slice_dir>/<stem>.f32` and the manifest to
/// `<dir>/<file_name>`, with record paths relative to `dir`.
pub fn write_manifest(
    dir: &Path,
    file_name: &str,
    slice_dir: &str,
    manifest: &DatasetManifest,
) -> Result<PathBuf> {
    let size = manifest.records.first().map_or(0, SliceRecord::size);
    let mut entries = Vec::with_capacity(manifest.len());
    let mut seen = BTreeMap::new();
    for r in &manifest.records {
        if r.size() != size {
            return Err(Error::data(format!(
                "manifest {} mixes image sizes {size} and {}",
                manifest.name,
                r.size()
            )));
        }
        let stem = r.stem();
        let n = seen.entry(stem.clone()).or_insert(0usize);
        let rel = if *n == 0 {
            format!("{slice_dir}/{stem}.f32")
        } else {
            format!("{slice_dir}/{stem}_{n}.f32")
        };
        *n += 1;
        write_slice(&dir.join(&rel), &r.pixels)?;
        entries.push(RecordEntry {
            path: rel,
            case_id: r.case_id.clone(),
            sequence: r.sequence,
            class_label: r.class_label,
            provenance: r.provenance,
            slice_index: r.slice_index,
        });
    }
    let file = ManifestFile {
        name: manifest.name.clone(),
        split: manifest.split,
        image_size: size,
        per_class_counts: manifest.per_class_counts.clone(),
        records: entries,
    };
    let path = dir.join(file_name);
    write_json(&path, &file)?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let file: ManifestFile = read_json(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut records = Vec::with_capacity(file.records.len());
    for e in file.records {
        let pixels = read_slice(&dir.join(&e.path), file.image_size)?;
        records.push(SliceRecord::new(
            e.case_id,
            e.sequence,
            pixels,
            e.class_label,
            e.provenance,
            e.slice_index,
        )?);
    }
    let manifest = DatasetManifest::new(file.name, file.split, records);
    if manifest.per_class_counts != file.per_class_counts {
        return Err(Error::data(format!(
            "{}: per_class_counts do not match the records",
            path.display()
        )));
    }
    Ok(manifest)
}

/// Maps `[-1, 1]` to 8-bit gray by `round((v + 1) * 127.5)`.
pub fn to_gray8(pixels: &Array2<f32>) -> Vec<u8> {
    pixels
        .iter()
        .map(|&v| ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round() as u8)
        .collect()
}

pub fn export_png(path: &Path, pixels: &Array2<f32>) -> Result<()> {
    let (h, w) = pixels.dim();
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let png_err = |e: png::EncodingError| Error::data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&to_gray8(pixels)).map_err(png_err)?;
    writer.finish().map_err(png_err)
}
