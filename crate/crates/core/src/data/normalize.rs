use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub const DEFAULT_IMAGE_SIZE: usize = 256;

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: ArrayView2<'_, f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    if (h, w) == (out_h, out_w) {
        return src.to_owned();
    }
    let axis = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    let rows: Vec<_> = (0..out_h).map(|i| axis(i, h, out_h)).collect();
    let cols: Vec<_> = (0..out_w).map(|j| axis(j, w, out_w)).collect();
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let (y0, y1, fy) = rows[i];
        let (x0, x1, fx) = cols[j];
        let top = src[[y0, x0]] * (1.0 - fx) + src[[y0, x1]] * fx;
        let bottom = src[[y1, x0]] * (1.0 - fx) + src[[y1, x1]] * fx;
        top * (1.0 - fy) + bottom * fy
    })
}

/// Resizes to `size x size` then min-max scales to `[-1, 1]`; a constant
/// slice maps to all `-1`.
pub fn normalize_slice(raw: ArrayView2<'_, f64>, size: usize) -> Result<Array2<f32>> {
    let (h, w) = raw.dim();
    if h == 0 || w == 0 || size == 0 {
        return Err(Error::data(format!("cannot normalize a {h}x{w} slice to {size}")));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::data("slice contains NaN or infinite values"));
    }
    let resized = resize_bilinear(raw, size, size);
    let (lo, hi) = resized
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    Ok(resized.mapv(|v| {
        if range > 0.0 {
            (((v - lo) / range) * 2.0 - 1.0).clamp(-1.0, 1.0) as f32
        } else {
            -1.0
        }
    }))
}
