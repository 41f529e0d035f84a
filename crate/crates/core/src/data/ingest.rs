use std::collections::BTreeMap;

use ndarray::Axis;

use super::normalize::{normalize_slice, DEFAULT_IMAGE_SIZE};
use super::selection::{central_healthy_slices, top_coverage_slices, tumor_coverage};
use super::{ClassLabel, Provenance, SliceRecord, VolumeRecord};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    /// Slices with the largest tumor coverage taken from each tumor case.
    pub tumor_slices: usize,
    /// Tumor-free slices nearest the center taken from each case.
    pub healthy_slices: usize,
    pub image_size: usize,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            tumor_slices: 5,
            healthy_slices: 5,
            image_size: DEFAULT_IMAGE_SIZE,
        }
    }
}

/// Selects and normalizes axial slices from every volume.
///
/// Volumes are grouped by case: slice indices come from the case's
/// segmentation, so every sequence of a case yields the same indices. Tumor
/// slices keep the volume label; healthy slices become `no_tumor`. Cases
/// labeled `no_tumor` contribute healthy slices only.
pub fn ingest_volumes(volumes: &[VolumeRecord], opts: &IngestOptions) -> Result<Vec<SliceRecord>> {
    let mut cases: BTreeMap<&str, Vec<&VolumeRecord>> = BTreeMap::new();
    for v in volumes {
        cases.entry(v.case_id.as_str()).or_default().push(v);
    }
    let mut out = Vec::new();
    for (case, mut vols) in cases {
        vols.sort_by_key(|v| v.sequence);
        if vols.windows(2).any(|w| w[0].sequence == w[1].sequence) {
            return Err(Error::data(format!("case {case}: duplicate sequence volumes")));
        }
        let first = vols[0];
        if vols.iter().any(|v| v.voxels.dim() != first.voxels.dim() || v.class_label != first.class_label) {
            return Err(Error::data(format!(
                "case {case}: sequences disagree on shape or class label"
            )));
        }
        let seg = vols
            .iter()
            .find_map(|v| v.seg.as_ref())
            .ok_or_else(|| Error::data(format!("case {case}: no segmentation")))?;
        let coverage = tumor_coverage(seg)?;
        let label_err = |e: Error| Error::data(format!("case {case}: {e}"));
        let mut picks: Vec<(usize, ClassLabel)> = Vec::new();
        if first.class_label.is_tumor() && opts.tumor_slices > 0 {
            for z in top_coverage_slices(&coverage, opts.tumor_slices).map_err(label_err)? {
                picks.push((z, first.class_label));
            }
        }
        if opts.healthy_slices > 0 {
            for z in central_healthy_slices(&coverage, opts.healthy_slices).map_err(label_err)? {
                picks.push((z, ClassLabel::NoTumor));
            }
        }
        for v in &vols {
            for &(z, label) in &picks {
                // Rows follow y, columns follow x.
                let plane = v.voxels.index_axis(Axis(2), z).t().mapv(f64::from);
                let pixels = normalize_slice(plane.view(), opts.image_size)
                    .map_err(|e| Error::data(format!("case {case} {} z={z}: {e}", v.sequence)))?;
                out.push(SliceRecord::new(
                    case,
                    v.sequence,
                    pixels,
                    label,
                    Provenance::Real,
                    Some(z),
                )?);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sequence;
    use ndarray::Array3;

    #[test]
    fn tumor_and_healthy_slices_per_sequence() {
        let mut seg = Array3::zeros((4, 4, 7));
        seg[[1, 1, 5]] = 1;
        seg[[1, 2, 5]] = 2;
        seg[[0, 0, 6]] = 1;
        let vox = Array3::from_shape_fn((4, 4, 7), |(x, y, z)| (x * y + z) as f32);
        let vols = vec![
            VolumeRecord::new("c", Sequence::T1, vox.clone(), Some(seg.clone()), ClassLabel::Glioma).unwrap(),
            VolumeRecord::new("c", Sequence::T2, vox, None, ClassLabel::Glioma).unwrap(),
        ];
        let opts = IngestOptions {
            tumor_slices: 2,
            healthy_slices: 1,
            image_size: 8,
        };
        let out = ingest_volumes(&vols, &opts).unwrap();
        assert_eq!(out.len(), 6);
        let t1: Vec<_> = out.iter().filter(|r| r.sequence == Sequence::T1).map(|r| (r.slice_index, r.class_label)).collect();
        assert_eq!(
            t1,
            vec![(Some(5), ClassLabel::Glioma), (Some(6), ClassLabel::Glioma), (Some(3), ClassLabel::NoTumor)]
        );
        assert!(out.iter().all(|r| r.size() == 8));
    }
}
