//! Layout operations: reshape, permute, concat, slice, padding, upsampling.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Op, Var};
use crate::tensor::{numel, strides, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Replicate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    /// Half-pixel-centre bilinear (`align_corners = false`).
    Bilinear,
}

pub(crate) fn permute<T: Float>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = x.shape();
    let in_strides = strides(s);
    let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let xd = x.data();
    let r = out_shape.len();
    if r == 0 {
        return x.clone();
    }
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(xd[off]);
        for d in (0..r).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn permute_backward<T: Float>(g: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    permute(g, &inv)
}

pub(crate) fn concat<T: Float>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let s0 = parts[0].shape();
    let outer: usize = s0[..axis].iter().product();
    let inner: usize = s0[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = s0.to_vec();
    shape[axis] = total;
    Tensor::from_parts(shape, out)
}

pub(crate) fn concat_backward<T: Float>(g: &Tensor<T>, shapes: &[&[usize]], axis: usize) -> Vec<Tensor<T>> {
    let mut start = 0;
    shapes
        .iter()
        .map(|s| {
            let t = slice(g, axis, start, s[axis]);
            start += s[axis];
            t
        })
        .collect()
}

pub(crate) fn slice<T: Float>(x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * s[axis] + start) * inner;
        out.extend_from_slice(&x.data()[base..base + len * inner]);
    }
    let mut shape = s.to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, out)
}

pub(crate) fn slice_backward<T: Float>(g: &Tensor<T>, in_shape: &[usize], axis: usize, start: usize) -> Tensor<T> {
    let outer: usize = in_shape[..axis].iter().product();
    let inner: usize = in_shape[axis + 1..].iter().product();
    let len = g.shape()[axis];
    let mut gx = vec![T::zero(); numel(in_shape)];
    for o in 0..outer {
        let base = (o * in_shape[axis] + start) * inner;
        gx[base..base + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

/// Source index along one padded axis, or `None` for a zero pad.
#[inline]
fn pad_src(i: usize, before: usize, size: usize, mode: PadMode) -> Option<usize> {
    let j = i as isize - before as isize;
    if j >= 0 && (j as usize) < size {
        return Some(j as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Replicate => Some(j.clamp(0, size as isize - 1) as usize),
    }
}

/// `pads = [top, bottom, left, right]` over the last two axes.
pub(crate) fn pad2d<T: Float>(x: &Tensor<T>, pads: [usize; 4], mode: PadMode) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let (ho, wo) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
    let planes = x.numel() / (h * w).max(1);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            let Some(si) = pad_src(i, pads[0], h, mode) else { continue };
            for j in 0..wo {
                if let Some(sj) = pad_src(j, pads[2], w, mode) {
                    dst[i * wo + j] = src[si * w + sj];
                }
            }
        }
    }
    let mut shape = s.to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::from_parts(shape, out)
}

pub(crate) fn pad2d_backward<T: Float>(g: &Tensor<T>, in_shape: &[usize], pads: [usize; 4], mode: PadMode) -> Tensor<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (ho, wo) = (h + pads[0] + pads[1], w + pads[2] + pads[3]);
    let planes = numel(in_shape) / (h * w).max(1);
    let mut gx = vec![T::zero(); numel(in_shape)];
    for p in 0..planes {
        let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            let Some(si) = pad_src(i, pads[0], h, mode) else { continue };
            for j in 0..wo {
                if let Some(sj) = pad_src(j, pads[2], w, mode) {
                    dst[si * w + sj] += src[i * wo + j];
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

/// Interpolation taps for doubling an axis of length `n`: `(i0, i1, frac)`.
fn bilinear_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n - 1);
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample2x<T: Float>(x: &Tensor<T>, mode: UpsampleMode) -> Tensor<T> {
    let s = x.shape();
    let r = s.len();
    let (h, w) = (s[r - 2], s[r - 1]);
    let (ho, wo) = (2 * h, 2 * w);
    let planes = x.numel() / (h * w).max(1);
    let mut out = vec![T::zero(); planes * ho * wo];
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for i in 0..ho {
            for j in 0..wo {
                dst[i * wo + j] = match mode {
                    UpsampleMode::Nearest => src[(i / 2) * w + j / 2],
                    UpsampleMode::Bilinear => {
                        let (y0, y1, fy) = ty[i];
                        let (x0, x1, fx) = tx[j];
                        let (fy, fx) = (T::of(fy), T::of(fx));
                        let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                        let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                        top * (T::one() - fy) + bot * fy
                    }
                };
            }
        }
    }
    let mut shape = s.to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::from_parts(shape, out)
}

pub(crate) fn upsample2x_backward<T: Float>(g: &Tensor<T>, in_shape: &[usize], mode: UpsampleMode) -> Tensor<T> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (ho, wo) = (2 * h, 2 * w);
    let planes = numel(in_shape) / (h * w).max(1);
    let mut gx = vec![T::zero(); numel(in_shape)];
    let (ty, tx) = (bilinear_taps(h), bilinear_taps(w));
    for p in 0..planes {
        let src = &g.data()[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut gx[p * h * w..(p + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let v = src[i * wo + j];
                match mode {
                    UpsampleMode::Nearest => dst[(i / 2) * w + j / 2] += v,
                    UpsampleMode::Bilinear => {
                        let (y0, y1, fy) = ty[i];
                        let (x0, x1, fx) = tx[j];
                        let (fy, fx) = (T::of(fy), T::of(fx));
                        let (one_y, one_x) = (T::one() - fy, T::one() - fx);
                        dst[y0 * w + x0] += v * one_y * one_x;
                        dst[y0 * w + x1] += v * one_y * fx;
                        dst[y1 * w + x0] += v * fy * one_x;
                        dst[y1 * w + x1] += v * fy * fx;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), gx)
}

impl<'g, T: Float> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        if numel(shape) != v.numel() {
            return Err(TensorError::Invalid {
                op: "reshape",
                msg: format!("cannot reshape {:?} into {shape:?}", v.shape()),
            });
        }
        let out = Tensor::from_parts(shape.to_vec(), v.data().to_vec());
        Ok(self.push(out, Op::Reshape { x: self.id() }, &[self.id()]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'g, T>> {
        let v = self.value();
        let mut seen = vec![false; v.ndim()];
        if perm.len() != v.ndim() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of the axes of {:?}", v.shape()),
            });
        }
        let out = permute(&v, perm);
        Ok(self.push(
            out,
            Op::Permute {
                x: self.id(),
                perm: perm.to_vec(),
            },
            &[self.id()],
        ))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let op = "concat";
        let first = *parts.first().ok_or_else(|| TensorError::Invalid {
            op,
            msg: "nothing to concatenate".into(),
        })?;
        let ids = parts.iter().map(|&p| first.same(p)).collect::<Result<Vec<_>>>()?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let s0 = values[0].shape();
        if axis >= s0.len() {
            return Err(TensorError::Invalid {
                op,
                msg: format!("axis {axis} out of range for {s0:?}"),
            });
        }
        for v in &values[1..] {
            let s = v.shape();
            if s.len() != s0.len() {
                return Err(TensorError::Rank {
                    op,
                    expected: s0.len(),
                    shape: s.to_vec(),
                });
            }
            if let Some(d) = (0..s.len()).find(|&d| d != axis && s[d] != s0[d]) {
                return Err(TensorError::Dim {
                    op,
                    dim: "non-concatenated axis",
                    expected: s0[d],
                    got: s[d],
                });
            }
        }
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| &**v).collect();
        let out = concat(&refs, axis);
        Ok(first.push(out, Op::Concat { parts: ids.clone(), axis }, &ids))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let v = self.value();
        if axis >= v.ndim() || start + len > v.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("[{start}, {}) on axis {axis} out of range for {:?}", start + len, v.shape()),
            });
        }
        let out = slice(&v, axis, start, len);
        Ok(self.push(out, Op::Slice { x: self.id(), axis, start }, &[self.id()]))
    }

    /// Cyclic shift by `shift` positions towards lower indices along `axis`
    /// (`out[i] = in[(i + shift) mod n]`).
    pub fn roll(self, axis: usize, shift: usize) -> Result<Var<'g, T>> {
        let n = *self.shape().get(axis).ok_or_else(|| TensorError::Invalid {
            op: "roll",
            msg: format!("axis {axis} out of range"),
        })?;
        let shift = if n == 0 { 0 } else { shift % n };
        if shift == 0 {
            return Ok(self);
        }
        let head = self.slice(axis, shift, n - shift)?;
        let tail = self.slice(axis, 0, shift)?;
        Var::concat(&[head, tail], axis)
    }

    /// Pads the last two axes by `[top, bottom, left, right]`.
    pub fn pad2d(self, pads: [usize; 4], mode: PadMode) -> Result<Var<'g, T>> {
        let v = self.value();
        if v.ndim() < 2 {
            return Err(TensorError::Rank {
                op: "pad2d",
                expected: 2,
                shape: v.shape().to_vec(),
            });
        }
        let r = v.ndim();
        if mode == PadMode::Replicate && v.shape()[r - 2] * v.shape()[r - 1] == 0 {
            return Err(TensorError::Invalid {
                op: "pad2d",
                msg: "cannot replicate-pad an empty plane".into(),
            });
        }
        let out = pad2d(&v, pads, mode);
        Ok(self.push(out, Op::Pad2d { x: self.id(), pads, mode }, &[self.id()]))
    }

    fn upsample(self, mode: UpsampleMode) -> Result<Var<'g, T>> {
        let v = self.value();
        if v.ndim() < 2 {
            return Err(TensorError::Rank {
                op: "upsample2x",
                expected: 2,
                shape: v.shape().to_vec(),
            });
        }
        let out = upsample2x(&v, mode);
        Ok(self.push(out, Op::Upsample2x { x: self.id(), mode }, &[self.id()]))
    }

    pub fn upsample_nearest2x(self) -> Result<Var<'g, T>> {
        self.upsample(UpsampleMode::Nearest)
    }

    pub fn upsample_bilinear2x(self) -> Result<Var<'g, T>> {
        self.upsample(UpsampleMode::Bilinear)
    }

    pub fn upsample2x(self, mode: UpsampleMode) -> Result<Var<'g, T>> {
        self.upsample(mode)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn permute_transposes() {
        let x = t(&[2, 3], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        let y = permute(&x, &[1, 0]);
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(permute_backward(&y, &[1, 0]), x);
    }

    #[test]
    fn permute_rejects_non_permutation() {
        let g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn concat_then_slice_roundtrip() {
        let g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(t(&[1, 1, 2], &[5.0, 6.0]));
        let c = Var::concat(&[a, b], 1).unwrap();
        assert_eq!(c.value().data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(c.slice(1, 2, 1).unwrap().value().data(), &[5.0, 6.0]);
    }

    #[test]
    fn concat_mismatch_rejected() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![1, 2, 3]));
        let b = g.constant(Tensor::zeros(vec![1, 2, 4]));
        assert!(Var::concat(&[a, b], 1).is_err());
    }

    #[test]
    fn roll_shifts_cyclically() {
        let g = Graph::<f64>::new();
        let x = g.constant(t(&[4], &[0.0, 1.0, 2.0, 3.0]));
        assert_eq!(x.roll(0, 1).unwrap().value().data(), &[1.0, 2.0, 3.0, 0.0]);
        assert_eq!(x.roll(0, 4).unwrap().value().data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn replicate_pad_copies_edges() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let y = pad2d(&x, [1, 0, 0, 2], PadMode::Replicate);
        assert_eq!(y.shape(), &[2, 4]);
        assert_eq!(y.data(), &[1.0, 2.0, 2.0, 2.0, 1.0, 2.0, 2.0, 2.0]);
        let z = pad2d(&x, [0, 0, 1, 1], PadMode::Zero);
        assert_eq!(z.data(), &[0.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn nearest_upsample_duplicates() {
        let x = t(&[1, 2], &[1.0, 2.0]);
        let y = upsample2x(&x, UpsampleMode::Nearest);
        assert_eq!(y.data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn bilinear_upsample_half_pixel() {
        let x = t(&[1, 2], &[0.0, 4.0]);
        let y = upsample2x(&x, UpsampleMode::Bilinear);
        assert_eq!(&y.data()[..4], &[0.0, 1.0, 3.0, 4.0]);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::<f64>::full(vec![3, 5], 2.5);
        let y = upsample2x(&x, UpsampleMode::Bilinear);
        assert!(y.data().iter().all(|&v| (v - 2.5).abs() < 1e-15));
    }
}
