//! Synthetic multi-sequence head phantoms with planted tumors.
//!
//! Tissue classes share one geometry across sequences and differ only in
//! intensity, so one sequence is a learnable function of another.

use ndarray::{Array3, Axis};
use rand::Rng;

use super::{normalize_slice, tumor_coverage, ClassLabel, Provenance, Sequence, SliceRecord, VolumeRecord};
use crate::error::Result;
use crate::util::stream_rng;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Tissue {
    Background,
    Csf,
    Gray,
    White,
    Tumor,
}

fn intensity(t: Tissue, seq: Sequence) -> f32 {
    use Tissue::*;
    match (seq, t) {
        (_, Background) => 0.0,
        (Sequence::T1, Csf) => 0.25,
        (Sequence::T1, Gray) => 0.55,
        (Sequence::T1, White) => 0.8,
        (Sequence::T1, Tumor) => 0.4,
        (Sequence::T2, Csf) => 1.0,
        (Sequence::T2, Gray) => 0.6,
        (Sequence::T2, White) => 0.35,
        (Sequence::T2, Tumor) => 0.9,
        (Sequence::Flair, Csf) => 0.1,
        (Sequence::Flair, Gray) => 0.55,
        (Sequence::Flair, White) => 0.4,
        (Sequence::Flair, Tumor) => 0.95,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub shape: (usize, usize, usize),
    /// Axial extent of a planted tumor, in slices.
    pub tumor_depth: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: (32, 32, 24),
            tumor_depth: 9,
        }
    }
}

type Geometry = (Array3<Tissue>, Array3<u32>);

/// Ellipsoidal head with ventricles, white and gray matter and, for tumor
/// classes, a planted lesion. Gliomas sit deep in the white matter,
/// meningiomas at the brain surface, pituitary tumors low on the midline.
fn geometry(class: ClassLabel, spec: &PhantomSpec, seed: u64) -> Geometry {
    let (nx, ny, nz) = spec.shape;
    let mut rng = stream_rng(seed, "phantom", 0);
    let (cx, cy, cz) = (nx as f64 / 2.0, ny as f64 / 2.0, nz as f64 / 2.0);
    let ax = nx as f64 * rng.random_range(0.36..0.42);
    let ay = ny as f64 * rng.random_range(0.40..0.46);
    let az = nz as f64 * 0.55;
    let vent = rng.random_range(0.12..0.2);

    let tumor = match class {
        ClassLabel::NoTumor => None,
        c => {
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (dx, dy) = match c {
                ClassLabel::Glioma => {
                    let radial = rng.random_range(0.2..0.4);
                    (radial * angle.cos(), radial * angle.sin())
                }
                ClassLabel::Meningioma => {
                    let radial = rng.random_range(0.72..0.8);
                    (radial * angle.cos(), radial * angle.sin())
                }
                _ => (rng.random_range(-0.05..0.05), rng.random_range(0.5..0.58)),
            };
            let tz = rng.random_range(cz - 2.0..cz + 2.0);
            let r = (nx.min(ny) as f64) * rng.random_range(0.1..0.14);
            Some((cx + dx * ax, cy + dy * ay, tz, r, spec.tumor_depth as f64 / 2.0))
        }
    };

    let mut tissue = Array3::from_elem(spec.shape, Tissue::Background);
    let mut seg = Array3::<u32>::zeros(spec.shape);
    for ((x, y, z), t) in tissue.indexed_iter_mut() {
        let dx = (x as f64 + 0.5 - cx) / ax;
        let dy = (y as f64 + 0.5 - cy) / ay;
        let dz = (z as f64 + 0.5 - cz) / az;
        let rho = (dx * dx + dy * dy + dz * dz).sqrt();
        if rho > 1.0 {
            continue;
        }
        *t = if rho < vent {
            Tissue::Csf
        } else if rho < 0.7 {
            Tissue::White
        } else if rho < 0.92 {
            Tissue::Gray
        } else {
            Tissue::Csf
        };
        if let Some((tx, ty, tz, r, hz)) = tumor {
            let ez = (z as f64 + 0.5 - tz) / hz;
            if ez.abs() < 1.0 {
                let rz = r * (1.0 - ez * ez).sqrt();
                let d = ((x as f64 + 0.5 - tx).powi(2) + (y as f64 + 0.5 - ty).powi(2)).sqrt();
                if d < rz {
                    *t = Tissue::Tumor;
                    seg[[x, y, z]] = if d < rz * 0.5 { 2 } else { 1 };
                }
            }
        }
    }
    (tissue, seg)
}

fn render(tissue: &Array3<Tissue>, seq: Sequence, seed: u64) -> Array3<f32> {
    let mut noise = stream_rng(seed, "phantom-noise", seq.channel() as u64);
    tissue.mapv(|t| {
        let v = intensity(t, seq);
        if t == Tissue::Background {
            v
        } else {
            v + noise.random_range(-0.02..0.02)
        }
    })
}

/// One case: a T1, T2 and FLAIR volume; the segmentation rides on T1.
/// `no_tumor` cases carry an empty segmentation.
pub fn phantom_case(case_id: &str, class: ClassLabel, spec: &PhantomSpec, seed: u64) -> Result<Vec<VolumeRecord>> {
    let (tissue, seg) = geometry(class, spec, seed);
    Sequence::ALL
        .iter()
        .map(|&seq| {
            let seg = if seq == Sequence::T1 { Some(seg.clone()) } else { None };
            VolumeRecord::new(case_id, seq, render(&tissue, seq, seed), seg, class)
        })
        .collect()
}

/// Co-registered T1, T2 and FLAIR slices of one 2-d case of any class,
/// including pituitary. The slice is the one with the largest tumor
/// coverage, or the central one for `no_tumor`.
pub fn phantom_slices(case_id: &str, class: ClassLabel, size: usize, seed: u64) -> Result<Vec<SliceRecord>> {
    let spec = PhantomSpec {
        shape: (size, size, 9),
        tumor_depth: 5,
    };
    let (tissue, seg) = geometry(class, &spec, seed);
    let coverage = tumor_coverage(&seg)?;
    let z = match class {
        ClassLabel::NoTumor => spec.shape.2 / 2,
        _ => (0..coverage.len()).max_by_key(|&z| (coverage[z], usize::MAX - z)).unwrap_or(0),
    };
    Sequence::ALL
        .iter()
        .map(|&seq| {
            let vol = render(&tissue, seq, seed);
            let plane = vol.index_axis(Axis(2), z).t().mapv(f64::from);
            let pixels = normalize_slice(plane.view(), size)?;
            SliceRecord::new(case_id, seq, pixels, class, Provenance::Real, Some(z))
        })
        .collect()
}

/// `n_per_class` 2-d cases of each listed class, all three sequences.
pub fn phantom_slice_set(classes: &[ClassLabel], n_per_class: usize, size: usize, seed: u64) -> Result<Vec<SliceRecord>> {
    let mut out = Vec::new();
    for &class in classes {
        for i in 0..n_per_class {
            let case_seed = crate::util::derive_seed(seed, class.name(), i as u64);
            out.extend(phantom_slices(&format!("{}-{i:03}", class.name()), class, size, case_seed)?);
        }
    }
    Ok(out)
}

/// `n_per_class` cases of each listed class, with case ids `<class>-<i>`.
pub fn phantom_cohort(
    classes: &[ClassLabel],
    n_per_class: usize,
    spec: &PhantomSpec,
    seed: u64,
) -> Result<Vec<VolumeRecord>> {
    let mut out = Vec::new();
    for &class in classes {
        for i in 0..n_per_class {
            let case_seed = crate::util::derive_seed(seed, class.name(), i as u64);
            out.extend(phantom_case(&format!("{}-{i:03}", class.name()), class, spec, case_seed)?);
        }
    }
    Ok(out)
}
