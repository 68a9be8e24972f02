//! Axis reductions, pooling, softmax and layer normalization.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Op, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Invalid {
            op,
            msg: format!("axis {axis} out of range for shape {shape:?}"),
        });
    }
    if shape[axis] == 0 {
        return Err(TensorError::Invalid {
            op,
            msg: format!("cannot reduce over empty axis {axis}"),
        });
    }
    Ok(())
}

/// Reduction keeping `axis` with size 1; returns argmax for `Max`.
pub(crate) fn reduce<T: Float>(x: &Tensor<T>, axis: usize, kind: ReduceKind) -> (Tensor<T>, Vec<u32>) {
    let (outer, len, inner) = split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); outer * inner];
    let mut argmax = Vec::new();
    if kind == ReduceKind::Max {
        argmax = vec![0u32; outer * inner];
    }
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let dst = o * inner + i;
            match kind {
                ReduceKind::Sum | ReduceKind::Mean => {
                    let mut acc = T::zero();
                    for k in 0..len {
                        acc += xd[base + k * inner];
                    }
                    if kind == ReduceKind::Mean {
                        acc /= T::of(len as f64);
                    }
                    out[dst] = acc;
                }
                ReduceKind::Max => {
                    let mut best = xd[base];
                    let mut arg = 0;
                    for k in 1..len {
                        let v = xd[base + k * inner];
                        if v > best {
                            best = v;
                            arg = k;
                        }
                    }
                    out[dst] = best;
                    argmax[dst] = arg as u32;
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    (Tensor::from_parts(shape, out), argmax)
}

pub(crate) fn reduce_backward<T: Float>(
    g: &Tensor<T>,
    in_shape: &[usize],
    axis: usize,
    kind: ReduceKind,
    argmax: &[u32],
) -> Tensor<T> {
    let (outer, len, inner) = split(in_shape, axis);
    let gd = g.data();
    let mut gx = vec![T::zero(); outer * len * inner];
    let scale = match kind {
        ReduceKind::Mean => T::one() / T::of(len as f64),
        _ => T::one(),
    };
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let src = gd[o * inner + i];
            match kind {
                ReduceKind::Max => gx[base + argmax[o * inner + i] as usize * inner] = src,
                _ => {
                    for k in 0..len {
                        gx[base + k * inner] = src * scale;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

pub(crate) fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split(x.shape(), axis);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(xd[base + k * inner]);
            }
            let mut s = T::zero();
            for k in 0..len {
                let e = (xd[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                s += e;
            }
            for k in 0..len {
                out[base + k * inner] /= s;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Float>(g: &Tensor<T>, y: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split(y.shape(), axis);
    let (gd, yd) = (g.data(), y.data());
    let mut gx = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                dot += gd[base + k * inner] * yd[base + k * inner];
            }
            for k in 0..len {
                let j = base + k * inner;
                gx[j] = yd[j] * (gd[j] - dot);
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

/// Normalizes each last-axis slice to zero mean, unit variance. Returns the
/// normalized tensor and per-slice reciprocal standard deviations.
pub(crate) fn layer_norm<T: Float>(x: &Tensor<T>, eps: T) -> (Tensor<T>, Vec<T>) {
    let d = *x.shape().last().unwrap();
    let mut out = vec![T::zero(); x.numel()];
    let mut rstds = Vec::with_capacity(x.numel() / d.max(1));
    for (src, dst) in x.data().chunks(d).zip(out.chunks_mut(d)) {
        let n = T::of(d as f64);
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rstd = T::one() / (var + eps).sqrt();
        for (o, &v) in dst.iter_mut().zip(src) {
            *o = (v - mean) * rstd;
        }
        rstds.push(rstd);
    }
    (Tensor::from_parts(x.shape().to_vec(), out), rstds)
}

pub(crate) fn layer_norm_backward<T: Float>(g: &Tensor<T>, y: &Tensor<T>, rstd: &[T]) -> Tensor<T> {
    let d = *y.shape().last().unwrap();
    let n = T::of(d as f64);
    let mut gx = vec![T::zero(); y.numel()];
    for (((gs, ys), dst), &r) in g.data().chunks(d).zip(y.data().chunks(d)).zip(gx.chunks_mut(d)).zip(rstd) {
        let mg = gs.iter().copied().sum::<T>() / n;
        let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((o, &gv), &yv) in dst.iter_mut().zip(gs).zip(ys) {
            *o = r * (gv - mg - yv * mgy);
        }
    }
    Tensor::from_parts(y.shape().to_vec(), gx)
}

fn window(i: usize, out: usize, size: usize) -> (usize, usize) {
    let start = i * size / out;
    let end = ((i + 1) * size).div_ceil(out);
    (start, end)
}

pub(crate) fn adaptive_avg_pool<T: Float>(x: &Tensor<T>, oh: usize, ow: usize) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let planes = x.numel() / (h * w).max(1);
    let mut out = vec![T::zero(); planes * oh * ow];
    for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = window(i, oh, h);
            for j in 0..ow {
                let (x0, x1) = window(j, ow, w);
                let mut acc = T::zero();
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += src[y * w + xx];
                    }
                }
                dst[i * ow + j] = acc / T::of(((y1 - y0) * (x1 - x0)) as f64);
            }
        }
    }
    let mut shape = s.to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::from_parts(shape, out)
}

pub(crate) fn adaptive_avg_pool_backward<T: Float>(g: &Tensor<T>, in_shape: &[usize]) -> Tensor<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let gs = g.shape();
    let (oh, ow) = (gs[r - 2], gs[r - 1]);
    let mut gx = vec![T::zero(); in_shape.iter().product()];
    for (p, src) in g.data().chunks(oh * ow).enumerate() {
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..oh {
            let (y0, y1) = window(i, oh, h);
            for j in 0..ow {
                let (x0, x1) = window(j, ow, w);
                let v = src[i * ow + j] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dst[y * w + xx] += v;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

impl<'g, T: Float> Var<'g, T> {
    fn reduce_op(self, op: &'static str, axis: usize, keepdim: bool, kind: ReduceKind) -> Result<Var<'g, T>> {
        let v = self.value();
        check_axis(op, v.shape(), axis)?;
        let (out, argmax) = reduce(&v, axis, kind);
        let r = self.push(
            out,
            Op::Reduce {
                x: self.id(),
                axis,
                kind,
                argmax,
            },
            &[self.id()],
        );
        if keepdim {
            Ok(r)
        } else {
            let mut shape = v.shape().to_vec();
            shape.remove(axis);
            r.reshape(&shape)
        }
    }

    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        self.reduce_op("sum_axis", axis, keepdim, ReduceKind::Sum)
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        self.reduce_op("mean_axis", axis, keepdim, ReduceKind::Mean)
    }

    /// Maximum along `axis`; the gradient flows to the first maximal entry.
    pub fn max_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        self.reduce_op("max_axis", axis, keepdim, ReduceKind::Max)
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum_all(self) -> Var<'g, T> {
        let s = self.value().data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::SumAll { x: self.id() }, &[self.id()])
    }

    pub fn mean_all(self) -> Var<'g, T> {
        let n = self.value().numel().max(1);
        self.sum_all().scale(1.0 / n as f64)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        check_axis("softmax", v.shape(), axis)?;
        let out = softmax(&v, axis);
        Ok(self.push(out, Op::Softmax { x: self.id(), axis }, &[self.id()]))
    }

    /// Normalization over the last axis without affine parameters.
    pub fn layer_norm(self, eps: f64) -> Result<Var<'g, T>> {
        let v = self.value();
        check_axis("layer_norm", v.shape(), v.ndim().saturating_sub(1))?;
        let (out, rstd) = layer_norm(&v, T::of(eps));
        Ok(self.push(out, Op::LayerNorm { x: self.id(), rstd }, &[self.id()]))
    }

    /// Adaptive average pooling of the last two axes to `oh x ow`.
    pub fn adaptive_avg_pool(self, oh: usize, ow: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        let s = v.shape();
        if s.len() < 2 {
            return Err(TensorError::Rank {
                op: "adaptive_avg_pool",
                expected: 2,
                shape: s.to_vec(),
            });
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(TensorError::Invalid {
                op: "adaptive_avg_pool",
                msg: format!("output {oh}x{ow} invalid for input {h}x{w}"),
            });
        }
        let out = adaptive_avg_pool(&v, oh, ow);
        Ok(self.push(out, Op::AdaptiveAvgPool { x: self.id() }, &[self.id()]))
    }

    fn spatial_flat(self, op: &'static str) -> Result<Var<'g, T>> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(TensorError::Rank {
                op,
                expected: 4,
                shape: s,
            });
        }
        if s[2] * s[3] == 0 {
            return Err(TensorError::Invalid {
                op,
                msg: "empty pooling window".into(),
            });
        }
        self.reshape(&[s[0], s[1], s[2] * s[3]])
    }

    /// `[N,C,H,W] -> [N,C,1,1]` mean.
    pub fn global_avg_pool(self) -> Result<Var<'g, T>> {
        let s = self.shape();
        self.spatial_flat("global_avg_pool")?
            .mean_axis(2, false)?
            .reshape(&[s[0], s[1], 1, 1])
    }

    /// `[N,C,H,W] -> [N,C,1,1]` maximum.
    pub fn global_max_pool(self) -> Result<Var<'g, T>> {
        let s = self.shape();
        self.spatial_flat("global_max_pool")?
            .max_axis(2, false)?
            .reshape(&[s[0], s[1], 1, 1])
    }

    /// `[N,C,H,W] -> [N,1,H,W]` mean over channels.
    pub fn channel_mean(self) -> Result<Var<'g, T>> {
        self.mean_axis(1, true)
    }

    /// `[N,C,H,W] -> [N,1,H,W]` maximum over channels.
    pub fn channel_max(self) -> Result<Var<'g, T>> {
        self.max_axis(1, true)
    }
}
