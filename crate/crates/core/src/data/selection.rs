use ndarray::{Array3, Axis};

use super::VolumeRecord;
use crate::error::{Error, Result};

/// Nonzero-label voxel count of every axial slice.
pub fn tumor_coverage(seg: &Array3<u32>) -> Result<Vec<usize>> {
    if seg.is_empty() {
        return Err(Error::data("empty volume"));
    }
    Ok(seg
        .axis_iter(Axis(2))
        .map(|plane| plane.iter().filter(|&&v| v != 0).count())
        .collect())
}

/// Indices of the `k` slices with the largest positive coverage, by
/// descending coverage then ascending index.
pub fn top_coverage_slices(coverage: &[usize], k: usize) -> Result<Vec<usize>> {
    let mut candidates: Vec<usize> = (0..coverage.len()).filter(|&z| coverage[z] > 0).collect();
    if candidates.len() < k {
        return Err(Error::data(format!(
            "needs {k} slices with tumor coverage, found {} (short by {})",
            candidates.len(),
            k - candidates.len()
        )));
    }
    candidates.sort_by(|&a, &b| coverage[b].cmp(&coverage[a]).then(a.cmp(&b)));
    candidates.truncate(k);
    Ok(candidates)
}

/// Indices of the `k` zero-coverage slices closest to `floor(Z/2)`, ties to
/// the lower index.
pub fn central_healthy_slices(coverage: &[usize], k: usize) -> Result<Vec<usize>> {
    let center = coverage.len() / 2;
    let mut candidates: Vec<usize> = (0..coverage.len()).filter(|&z| coverage[z] == 0).collect();
    if candidates.len() < k {
        return Err(Error::data(format!(
            "needs {k} tumor-free slices, found {} (short by {})",
            candidates.len(),
            k - candidates.len()
        )));
    }
    candidates.sort_by_key(|&z| (z.abs_diff(center), z));
    candidates.truncate(k);
    Ok(candidates)
}

fn volume_coverage(volume: &VolumeRecord) -> Result<Vec<usize>> {
    let seg = volume
        .seg
        .as_ref()
        .ok_or_else(|| Error::data(format!("case {}: no segmentation", volume.case_id)))?;
    tumor_coverage(seg)
}

pub fn select_tumor_slices(volume: &VolumeRecord, k: usize) -> Result<Vec<usize>> {
    top_coverage_slices(&volume_coverage(volume)?, k)
        .map_err(|e| Error::data(format!("case {}: {}", volume.case_id, strip(e))))
}

pub fn select_healthy_slices(volume: &VolumeRecord, k: usize) -> Result<Vec<usize>> {
    central_healthy_slices(&volume_coverage(volume)?, k)
        .map_err(|e| Error::data(format!("case {}: {}", volume.case_id, strip(e))))
}

fn strip(e: Error) -> String {
    match e {
        Error::Data(m) => m,
        other => other.to_string(),
    }
}
