//! Differentiable operations on [`Var`].

use crate::error::{Result, TensorError};
use crate::graph::Var;
use crate::kernels;
use crate::tensor::{shape_str, Tensor};

fn same_shape(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::shape(op, shape_str(&sa), shape_str(&sb)));
    }
    Ok(())
}

fn dims4(op: &'static str, v: &Var<'_>) -> Result<[usize; 4]> {
    v.value().dims4(op)
}

impl<'g> Var<'g> {
    fn unary(
        &self,
        out: Tensor,
        bw: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    ) -> Var<'g> {
        self.graph.push(
            out,
            &[*self],
            Box::new(move |g, inputs, out| vec![Some(bw(g, inputs[0], out))]),
        )
    }

    pub fn add(&self, other: Var<'g>) -> Result<Var<'g>> {
        same_shape("add", self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        Ok(self.graph.push(
            out,
            &[*self, other],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, other: Var<'g>) -> Result<Var<'g>> {
        same_shape("sub", self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        Ok(self.graph.push(
            out,
            &[*self, other],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        ))
    }

    pub fn mul(&self, other: Var<'g>) -> Result<Var<'g>> {
        same_shape("mul", self, &other)?;
        let out = self.value().zip_map(&other.value(), |a, b| a * b);
        Ok(self.graph.push(
            out,
            &[*self, other],
            Box::new(|g, x, _| {
                vec![
                    Some(g.zip_map(x[1], |g, b| g * b)),
                    Some(g.zip_map(x[0], |g, a| g * a)),
                ]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Var<'g> {
        self.unary(self.value().map(|v| v * c), move |g, _, _| g.map(|v| v * c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'g> {
        self.unary(self.value().map(|v| v + c), |g, _, _| g.clone())
    }

    pub fn relu(&self) -> Var<'g> {
        self.unary(self.value().map(|v| v.max(0.0)), |g, x, _| {
            g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 })
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g> {
        self.unary(
            self.value().map(|v| if v > 0.0 { v } else { slope * v }),
            move |g, x, _| g.zip_map(x, |g, x| if x > 0.0 { g } else { slope * g }),
        )
    }

    pub fn tanh(&self) -> Var<'g> {
        self.unary(self.value().map(f64::tanh), |g, _, y| {
            g.zip_map(y, |g, y| g * (1.0 - y * y))
        })
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<'g> {
        const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
        let inv_sqrt_2pi = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        self.unary(
            self.value()
                .map(|x| 0.5 * x * (1.0 + kernels::erf(x * INV_SQRT2))),
            move |g, x, _| {
                g.zip_map(x, |g, x| {
                    let cdf = 0.5 * (1.0 + kernels::erf(x * INV_SQRT2));
                    let pdf = inv_sqrt_2pi * (-0.5 * x * x).exp();
                    g * (cdf + x * pdf)
                })
            },
        )
    }

    pub fn abs(&self) -> Var<'g> {
        self.unary(self.value().map(f64::abs), |g, x, _| {
            g.zip_map(x, |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            })
        })
    }

    pub fn square(&self) -> Var<'g> {
        self.unary(self.value().map(|v| v * v), |g, x, _| {
            g.zip_map(x, |g, x| 2.0 * g * x)
        })
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&self, eps: f64) -> Var<'g> {
        self.unary(self.value().map(|v| v.max(eps).ln()), move |g, x, _| {
            g.zip_map(x, |g, x| if x > eps { g / x } else { 0.0 })
        })
    }

    pub fn sum(&self) -> Var<'g> {
        let total = self.value().sum();
        self.unary(Tensor::scalar(total), |g, x, _| Tensor::full(x.shape(), g.item()))
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g>> {
        let out = self.value().reshape(shape)?;
        Ok(self.unary(out, |g, x, _| g.reshape(x.shape()).unwrap()))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'g>> {
        let nd = self.value().ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("{axes:?} is not a permutation of {nd} axes"),
            ));
        }
        let out = kernels::permute(&self.value(), axes);
        let inv = kernels::inverse_axes(axes);
        Ok(self.unary(out, move |g, _, _| kernels::permute(g, &inv)))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Var<'g>> {
        let nd = self.value().ndim();
        if nd < 2 {
            return Err(TensorError::invalid("transpose_last", "needs at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(&axes)
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'g>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, out)?;
        Ok(self.unary(out, move |g, x, _| {
            let mut dx = Tensor::zeros(x.shape());
            let d = dx.data_mut();
            for o in 0..outer {
                let base = (o * full + start) * inner;
                d[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            dx
        }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'g>], axis: usize) -> Result<Var<'g>> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let graph = first.graph;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} out of range")));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::shape("concat", shape_str(&base), shape_str(&s)));
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &s) in values.iter().zip(&sizes) {
                out.extend_from_slice(&v.data()[o * s * inner..(o + 1) * s * inner]);
            }
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let out = Tensor::new(out_shape, out)?;
        let sizes_bw = sizes.clone();
        Ok(graph.push(
            out,
            parts,
            Box::new(move |g, inputs, _| {
                let mut grads: Vec<Vec<f64>> = sizes_bw
                    .iter()
                    .map(|&s| Vec::with_capacity(outer * s * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gr, &s) in grads.iter_mut().zip(&sizes_bw) {
                        gr.extend_from_slice(&g.data()[off..off + s * inner]);
                        off += s * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(inputs)
                    .map(|(d, x)| Some(Tensor::new(x.shape().to_vec(), d).unwrap()))
                    .collect()
            }),
        ))
    }

    /// Adds `bias (C)` along axis 1 of `(N, C, ...)`.
    pub fn add_channel_bias(&self, bias: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let b = bias.value();
        if x.ndim() < 2 || b.shape() != [x.shape()[1]] {
            return Err(TensorError::shape(
                "add_channel_bias",
                format!("bias [C] for input {:?}", x.shape()),
                shape_str(b.shape()),
            ));
        }
        let c = x.shape()[1];
        let inner: usize = x.shape()[2..].iter().product();
        let mut out = x.as_ref().clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[(i / inner) % c];
        }
        Ok(self.graph.push(
            out,
            &[*self, bias],
            Box::new(move |g, _, _| {
                let mut db = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    db[(i / inner) % c] += v;
                }
                vec![Some(g.clone()), Some(Tensor::new(vec![c], db).unwrap())]
            }),
        ))
    }

    /// Adds `bias (D)` along the last axis.
    pub fn add_bias(&self, bias: Var<'g>) -> Result<Var<'g>> {
        let x = self.value();
        let b = bias.value();
        let d = *x.shape().last().unwrap_or(&0);
        if b.shape() != [d] {
            return Err(TensorError::shape(
                "add_bias",
                format!("[{d}]"),
                shape_str(b.shape()),
            ));
        }
        let mut out = x.as_ref().clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += b.data()[i % d];
        }
        Ok(self.graph.push(
            out,
            &[*self, bias],
            Box::new(move |g, _, _| {
                let mut db = vec![0.0; d];
                for (i, v) in g.data().iter().enumerate() {
                    db[i % d] += v;
                }
                vec![Some(g.clone()), Some(Tensor::new(vec![d], db).unwrap())]
            }),
        ))
    }

    /// 2-d matrix product `(M,K) x (K,N)`.
    pub fn matmul(&self, other: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (m, k, n) = match (a.shape(), b.shape()) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            (sa, sb) => {
                return Err(TensorError::shape(
                    "matmul",
                    format!("[M,K] x [K,N] with lhs {sa:?}"),
                    shape_str(sb),
                ))
            }
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, a.data(), false, b.data(), false, 0.0, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.graph.push(
            out,
            &[*self, other],
            Box::new(move |g, x, _| {
                let mut da = vec![0.0; m * k];
                kernels::gemm(m, n, k, g.data(), false, x[1].data(), true, 0.0, &mut da);
                let mut db = vec![0.0; k * n];
                kernels::gemm(k, m, n, x[0].data(), true, g.data(), false, 0.0, &mut db);
                vec![
                    Some(Tensor::new(vec![m, k], da).unwrap()),
                    Some(Tensor::new(vec![k, n], db).unwrap()),
                ]
            }),
        ))
    }

    /// Batched product `(B,M,K) x (B,K,N)`.
    pub fn bmm(&self, other: Var<'g>) -> Result<Var<'g>> {
        let a = self.value();
        let b = other.value();
        let (bs, m, k, n) = match (a.shape(), b.shape()) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            (sa, sb) => {
                return Err(TensorError::shape(
                    "bmm",
                    format!("[B,M,K] x [B,K,N] with lhs {sa:?}"),
                    shape_str(sb),
                ))
            }
        };
        let mut out = vec![0.0; bs * m * n];
        for i in 0..bs {
            kernels::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                false,
                &b.data()[i * k * n..(i + 1) * k * n],
                false,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let out = Tensor::new(vec![bs, m, n], out)?;
        Ok(self.graph.push(
            out,
            &[*self, other],
            Box::new(move |g, x, _| {
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        gi,
                        false,
                        &x[1].data()[i * k * n..(i + 1) * k * n],
                        true,
                        0.0,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    kernels::gemm(
                        k,
                        m,
                        n,
                        &x[0].data()[i * m * k..(i + 1) * m * k],
                        true,
                        gi,
                        false,
                        0.0,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                vec![
                    Some(Tensor::new(vec![bs, m, k], da).unwrap()),
                    Some(Tensor::new(vec![bs, k, n], db).unwrap()),
                ]
            }),
        ))
    }

    /// Zero-padded 2-d convolution, weight `(C_out, C_in, k, k)`, no bias.
    pub fn conv2d(&self, weight: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let [_, c, h, w] = dims4("conv2d", self)?;
        let [_, wc, k, k2] = dims4("conv2d", &weight)?;
        if wc != c || k != k2 {
            return Err(TensorError::shape(
                "conv2d",
                format!("weight [O,{c},k,k]"),
                shape_str(&weight.shape()),
            ));
        }
        if stride == 0 || kernels::conv_out(h, k, stride, pad).is_none()
            || kernels::conv_out(w, k, stride, pad).is_none()
        {
            return Err(TensorError::invalid(
                "conv2d",
                format!("kernel {k} stride {stride} pad {pad} does not fit {h}x{w}"),
            ));
        }
        let out = kernels::conv2d(&self.value(), &weight.value(), stride, pad);
        let need = (self.requires_grad(), weight.requires_grad());
        Ok(self.graph.push(
            out,
            &[*self, weight],
            Box::new(move |g, x, _| {
                let (dx, dw) = kernels::conv2d_backward(x[0], x[1], g, stride, pad, need.0, need.1);
                vec![dx, dw]
            }),
        ))
    }

    /// Transposed 2-d convolution, weight `(C_in, C_out, k, k)`, no bias.
    pub fn conv_transpose2d(
        &self,
        weight: Var<'g>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Var<'g>> {
        let [_, c, h, w] = dims4("conv_transpose2d", self)?;
        let [wc, _, k, k2] = dims4("conv_transpose2d", &weight)?;
        if wc != c || k != k2 {
            return Err(TensorError::shape(
                "conv_transpose2d",
                format!("weight [{c},O,k,k]"),
                shape_str(&weight.shape()),
            ));
        }
        if stride == 0
            || out_pad >= stride
            || kernels::conv_transpose_out(h, k, stride, pad, out_pad).is_none()
            || kernels::conv_transpose_out(w, k, stride, pad, out_pad).is_none()
        {
            return Err(TensorError::invalid(
                "conv_transpose2d",
                format!("kernel {k} stride {stride} pad {pad} output_padding {out_pad} on {h}x{w}"),
            ));
        }
        let out = kernels::conv_transpose2d(&self.value(), &weight.value(), stride, pad, out_pad);
        let need = (self.requires_grad(), weight.requires_grad());
        Ok(self.graph.push(
            out,
            &[*self, weight],
            Box::new(move |g, x, _| {
                let (dx, dw) =
                    kernels::conv_transpose2d_backward(x[0], x[1], g, stride, pad, need.0, need.1);
                vec![dx, dw]
            }),
        ))
    }

    /// Reflection padding of the two spatial axes.
    pub fn reflect_pad2d(&self, pad: usize) -> Result<Var<'g>> {
        let [n, c, h, w] = dims4("reflect_pad2d", self)?;
        if pad >= h || pad >= w {
            return Err(TensorError::invalid(
                "reflect_pad2d",
                format!("pad {pad} needs spatial size > {pad}, got {h}x{w}"),
            ));
        }
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let x = self.value();
        let mut out = vec![0.0; n * c * ph * pw];
        let index = move |y: usize, xx: usize| {
            let sy = kernels::reflect_index(y as isize - pad as isize, h);
            let sx = kernels::reflect_index(xx as isize - pad as isize, w);
            sy * w + sx
        };
        for p in 0..n * c {
            let src = &x.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * ph * pw..(p + 1) * ph * pw];
            for y in 0..ph {
                for xx in 0..pw {
                    dst[y * pw + xx] = src[index(y, xx)];
                }
            }
        }
        let out = Tensor::new(vec![n, c, ph, pw], out)?;
        Ok(self.unary(out, move |g, x, _| {
            let mut dx = Tensor::zeros(x.shape());
            let d = dx.data_mut();
            for p in 0..n * c {
                let gs = &g.data()[p * ph * pw..(p + 1) * ph * pw];
                let ds = &mut d[p * h * w..(p + 1) * h * w];
                for y in 0..ph {
                    for xx in 0..pw {
                        ds[index(y, xx)] += gs[y * pw + xx];
                    }
                }
            }
            dx
        }))
    }

    /// Instance normalization over the spatial axes of `(N,C,H,W)` with
    /// per-channel affine `gamma`, `beta`.
    pub fn instance_norm(&self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let [n, c, h, w] = dims4("instance_norm", self)?;
        for (name, p) in [("gamma", &gamma), ("beta", &beta)] {
            if p.shape() != [c] {
                return Err(TensorError::shape(
                    "instance_norm",
                    format!("{name} [{c}]"),
                    shape_str(&p.shape()),
                ));
            }
        }
        let (xhat, inv_std) = normalize_groups(&self.value(), n * c, h * w, eps);
        let gv = gamma.value();
        let bv = beta.value();
        let m = h * w;
        let mut out = xhat.clone();
        for (i, v) in out.iter_mut().enumerate() {
            let ch = (i / m) % c;
            *v = *v * gv.data()[ch] + bv.data()[ch];
        }
        let out = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.graph.push(
            out,
            &[*self, gamma, beta],
            Box::new(move |g, x, _| {
                let gamma = x[1].data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dxhat = vec![0.0; g.numel()];
                for (i, (&gi, &xh)) in g.data().iter().zip(&xhat).enumerate() {
                    let ch = (i / m) % c;
                    dgamma[ch] += gi * xh;
                    dbeta[ch] += gi;
                    dxhat[i] = gi * gamma[ch];
                }
                let dx = normalize_backward(&dxhat, &xhat, &inv_std, m);
                vec![
                    Some(Tensor::new(x[0].shape().to_vec(), dx).unwrap()),
                    Some(Tensor::new(vec![c], dgamma).unwrap()),
                    Some(Tensor::new(vec![c], dbeta).unwrap()),
                ]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: Var<'g>, beta: Var<'g>, eps: f64) -> Result<Var<'g>> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&0);
        for (name, p) in [("gamma", &gamma), ("beta", &beta)] {
            if p.shape() != [d] {
                return Err(TensorError::shape(
                    "layer_norm",
                    format!("{name} [{d}]"),
                    shape_str(&p.shape()),
                ));
            }
        }
        let groups = x.numel() / d;
        let (xhat, inv_std) = normalize_groups(&x, groups, d, eps);
        let gv = gamma.value();
        let bv = beta.value();
        let mut out = xhat.clone();
        for (i, v) in out.iter_mut().enumerate() {
            *v = *v * gv.data()[i % d] + bv.data()[i % d];
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.graph.push(
            out,
            &[*self, gamma, beta],
            Box::new(move |g, x, _| {
                let gamma = x[1].data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; g.numel()];
                for (i, (&gi, &xh)) in g.data().iter().zip(&xhat).enumerate() {
                    dgamma[i % d] += gi * xh;
                    dbeta[i % d] += gi;
                    dxhat[i] = gi * gamma[i % d];
                }
                let dx = normalize_backward(&dxhat, &xhat, &inv_std, d);
                vec![
                    Some(Tensor::new(x[0].shape().to_vec(), dx).unwrap()),
                    Some(Tensor::new(vec![d], dgamma).unwrap()),
                    Some(Tensor::new(vec![d], dbeta).unwrap()),
                ]
            }),
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Var<'g> {
        let x = self.value();
        let d = *x.shape().last().unwrap_or(&1);
        let mut out = x.as_ref().clone();
        for row in out.data_mut().chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.unary(out, move |g, _, y| {
            let mut dx = vec![0.0; g.numel()];
            for ((dr, gr), yr) in dx
                .chunks_mut(d)
                .zip(g.data().chunks(d))
                .zip(y.data().chunks(d))
            {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for ((o, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            Tensor::new(y.shape().to_vec(), dx).unwrap()
        })
    }

    /// Mean over the spatial axes: `(N,C,H,W) -> (N,C)`.
    pub fn spatial_mean(&self) -> Result<Var<'g>> {
        let [n, c, h, w] = dims4("spatial_mean", self)?;
        let m = h * w;
        let x = self.value();
        let out: Vec<f64> = x
            .data()
            .chunks(m)
            .map(|p| p.iter().sum::<f64>() / m as f64)
            .collect();
        let out = Tensor::new(vec![n, c], out)?;
        Ok(self.unary(out, move |g, x, _| {
            let mut dx = Tensor::zeros(x.shape());
            for (p, gv) in dx.data_mut().chunks_mut(m).zip(g.data()) {
                p.fill(gv / m as f64);
            }
            dx
        }))
    }
}

/// Standardizes `groups` contiguous runs of length `m`; returns `(xhat, 1/std)`.
fn normalize_groups(x: &Tensor, groups: usize, m: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
    let mut xhat = vec![0.0; groups * m];
    let mut inv_std = vec![0.0; groups];
    for gi in 0..groups {
        let s = &x.data()[gi * m..(gi + 1) * m];
        let mean = s.iter().sum::<f64>() / m as f64;
        let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        let is = 1.0 / (var + eps).sqrt();
        inv_std[gi] = is;
        for (o, v) in xhat[gi * m..(gi + 1) * m].iter_mut().zip(s) {
            *o = (v - mean) * is;
        }
    }
    (xhat, inv_std)
}

fn normalize_backward(dxhat: &[f64], xhat: &[f64], inv_std: &[f64], m: usize) -> Vec<f64> {
    let mut dx = vec![0.0; dxhat.len()];
    for (gi, &is) in inv_std.iter().enumerate() {
        let r = gi * m..(gi + 1) * m;
        let dh = &dxhat[r.clone()];
        let xh = &xhat[r.clone()];
        let mean_dh = dh.iter().sum::<f64>() / m as f64;
        let mean_dhx = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / m as f64;
        for ((o, &a), &b) in dx[r].iter_mut().zip(dh).zip(xh) {
            *o = is * (a - mean_dh - b * mean_dhx);
        }
    }
    dx
}
