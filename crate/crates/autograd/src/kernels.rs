//! Slice-level numeric kernels shared by forward and backward passes.

use crate::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
///
/// `op(a)` is `m x k`, `op(b)` is `k x n`. With `ta` set, `a` is stored as
/// `k x m` and read transposed (likewise `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the pointer/stride pairs describe exactly the m*k, k*n and m*n
    // buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output extent of a convolution along one axis.
pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out(
    size: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Option<usize> {
    let full = (size - 1) * stride + kernel + out_pad;
    full.checked_sub(2 * pad).filter(|&v| v > 0)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one image `(C, H, W)` into a `(C*k*k, OH*OW)` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds a patch matrix back onto an image.
pub fn col2im(col: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let cols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `x (N,C,H,W) * w (O,C,k,k)` with zero padding.
pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let [n, c, h, wd] = x.dims4("conv2d").unwrap();
    let [o, _, k, _] = w.dims4("conv2d").unwrap();
    let oh = conv_out(h, k, stride, pad).unwrap();
    let ow = conv_out(wd, k, stride, pad).unwrap();
    let g = ConvGeom {
        channels: c,
        h,
        w: wd,
        k,
        stride,
        pad,
        oh,
        ow,
    };
    let mut out = vec![0.0; n * o * oh * ow];
    let mut col = vec![0.0; g.col_rows() * g.col_cols()];
    let in_sz = c * h * wd;
    let out_sz = o * oh * ow;
    for b in 0..n {
        im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &g, &mut col);
        gemm(
            o,
            g.col_rows(),
            g.col_cols(),
            w.data(),
            false,
            &col,
            false,
            0.0,
            &mut out[b * out_sz..(b + 1) * out_sz],
        );
    }
    Tensor::new(vec![n, o, oh, ow], out).unwrap()
}

/// Gradients of [`conv2d`] with respect to input and weight.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let [n, c, h, wd] = x.dims4("conv2d").unwrap();
    let [o, _, k, _] = w.dims4("conv2d").unwrap();
    let [_, _, oh, ow] = dy.dims4("conv2d").unwrap();
    let g = ConvGeom {
        channels: c,
        h,
        w: wd,
        k,
        stride,
        pad,
        oh,
        ow,
    };
    let rows = g.col_rows();
    let cols = g.col_cols();
    let mut col = vec![0.0; rows * cols];
    let mut dx = need_dx.then(|| vec![0.0; x.numel()]);
    let mut dw = need_dw.then(|| vec![0.0; w.numel()]);
    let in_sz = c * h * wd;
    let out_sz = o * oh * ow;
    for b in 0..n {
        let dyb = &dy.data()[b * out_sz..(b + 1) * out_sz];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[b * in_sz..(b + 1) * in_sz], &g, &mut col);
            gemm(o, cols, rows, dyb, false, &col, true, 1.0, dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, o, cols, w.data(), true, dyb, false, 0.0, &mut col);
            col2im(&col, &g, &mut dx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
    )
}

/// Transposed convolution, `w` laid out as `(C_in, C_out, k, k)`.
pub fn conv_transpose2d(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Tensor {
    let [n, ci, h, wd] = x.dims4("conv_transpose2d").unwrap();
    let [_, co, k, _] = w.dims4("conv_transpose2d").unwrap();
    let oh = conv_transpose_out(h, k, stride, pad, out_pad).unwrap();
    let ow = conv_transpose_out(wd, k, stride, pad, out_pad).unwrap();
    // The transposed conv is the data-adjoint of a conv mapping (co, oh, ow) to (ci, h, w).
    let g = ConvGeom {
        channels: co,
        h: oh,
        w: ow,
        k,
        stride,
        pad,
        oh: h,
        ow: wd,
    };
    let rows = g.col_rows();
    let cols = g.col_cols();
    let mut col = vec![0.0; rows * cols];
    let mut out = vec![0.0; n * co * oh * ow];
    let in_sz = ci * h * wd;
    let out_sz = co * oh * ow;
    for b in 0..n {
        gemm(
            rows,
            ci,
            cols,
            w.data(),
            true,
            &x.data()[b * in_sz..(b + 1) * in_sz],
            false,
            0.0,
            &mut col,
        );
        col2im(&col, &g, &mut out[b * out_sz..(b + 1) * out_sz]);
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

pub fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    dy: &Tensor,
    stride: usize,
    pad: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let [n, ci, h, wd] = x.dims4("conv_transpose2d").unwrap();
    let [_, co, k, _] = w.dims4("conv_transpose2d").unwrap();
    let [_, _, oh, ow] = dy.dims4("conv_transpose2d").unwrap();
    let g = ConvGeom {
        channels: co,
        h: oh,
        w: ow,
        k,
        stride,
        pad,
        oh: h,
        ow: wd,
    };
    let rows = g.col_rows();
    let cols = g.col_cols();
    let mut col = vec![0.0; rows * cols];
    let mut dx = need_dx.then(|| vec![0.0; x.numel()]);
    let mut dw = need_dw.then(|| vec![0.0; w.numel()]);
    let in_sz = ci * h * wd;
    let out_sz = co * oh * ow;
    for b in 0..n {
        im2col(&dy.data()[b * out_sz..(b + 1) * out_sz], &g, &mut col);
        if let Some(dx) = dx.as_mut() {
            gemm(
                ci,
                rows,
                cols,
                w.data(),
                false,
                &col,
                false,
                0.0,
                &mut dx[b * in_sz..(b + 1) * in_sz],
            );
        }
        if let Some(dw) = dw.as_mut() {
            gemm(
                ci,
                cols,
                rows,
                &x.data()[b * in_sz..(b + 1) * in_sz],
                false,
                &col,
                true,
                1.0,
                dw,
            );
        }
    }
    (
        dx.map(|d| Tensor::new(x.shape().to_vec(), d).unwrap()),
        dw.map(|d| Tensor::new(w.shape().to_vec(), d).unwrap()),
    )
}

/// Reflected index for padding (no edge repeat), valid when `pad < size`.
#[inline]
pub fn reflect_index(i: isize, size: usize) -> usize {
    let n = size as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let nd = out_shape.len();
    if nd == 0 {
        return x.clone();
    }
    let mut idx = vec![0usize; nd];
    let src = x.data();
    let last = nd - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut offset = 0usize;
    while out.len() < n {
        for j in 0..inner {
            out.push(src[offset + j * inner_stride]);
        }
        // advance the outer multi-index
        let mut d = last;
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub fn erf(x: f64) -> f64 {
    libm::erf(x)
}
