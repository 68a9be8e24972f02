use crate::error::{Result, TensorError};
use crate::float::{gemm, Float, Mat};
use crate::graph::{Op, Var};
use crate::parallel;
use crate::tensor::Tensor;

/// `y = x W^T + b` over the last axis of `x`; `w` is `[out, in]`.
pub fn linear<T: Float>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    if xs.is_empty() {
        return Err(TensorError::Rank {
            op: "linear",
            expected: 1,
            shape: xs.to_vec(),
        });
    }
    if w.ndim() != 2 {
        return Err(TensorError::Rank {
            op: "linear",
            expected: 2,
            shape: w.shape().to_vec(),
        });
    }
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let k = xs[xs.len() - 1];
    if k != in_f {
        return Err(TensorError::Dim {
            op: "linear",
            dim: "in_features",
            expected: in_f,
            got: k,
        });
    }
    if let Some(b) = b {
        if b.shape() != [out_f] {
            return Err(TensorError::Dim {
                op: "linear",
                dim: "bias",
                expected: out_f,
                got: b.numel(),
            });
        }
    }
    let m = x.numel() / k.max(1);
    let mut y = vec![T::zero(); m * out_f];
    if let Some(b) = b {
        for row in y.chunks_mut(out_f.max(1)) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    gemm(m, k, out_f, Mat::rm(x.data(), k), Mat::rm_t(w.data(), in_f), beta, &mut y);
    let mut shape = xs.to_vec();
    *shape.last_mut().unwrap() = out_f;
    Ok(Tensor::from_parts(shape, y))
}

pub(crate) fn linear_backward<T: Float>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (out_f, in_f) = (w.shape()[0], w.shape()[1]);
    let m = x.numel() / in_f.max(1);
    let mut gx = vec![T::zero(); x.numel()];
    gemm(m, out_f, in_f, Mat::rm(g.data(), out_f), Mat::rm(w.data(), in_f), T::zero(), &mut gx);
    let mut gw = vec![T::zero(); w.numel()];
    gemm(out_f, m, in_f, Mat::rm_t(g.data(), out_f), Mat::rm(x.data(), in_f), T::zero(), &mut gw);
    let gb = has_bias.then(|| {
        let mut gb = vec![T::zero(); out_f];
        for row in g.data().chunks(out_f) {
            for (a, &v) in gb.iter_mut().zip(row) {
                *a += v;
            }
        }
        Tensor::from_parts(vec![out_f], gb)
    });
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(w.shape().to_vec(), gw),
        gb,
    )
}

struct MatmulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_dims(a: &[usize], b: &[usize], trans_b: bool) -> Result<MatmulDims> {
    let op = "matmul";
    if a.len() < 2 || a.len() != b.len() {
        return Err(TensorError::Rank {
            op,
            expected: a.len().max(2),
            shape: b.to_vec(),
        });
    }
    let r = a.len();
    for d in 0..r - 2 {
        if a[d] != b[d] {
            return Err(TensorError::Dim {
                op,
                dim: "batch",
                expected: a[d],
                got: b[d],
            });
        }
    }
    let (m, k) = (a[r - 2], a[r - 1]);
    let (kb, n) = if trans_b { (b[r - 1], b[r - 2]) } else { (b[r - 2], b[r - 1]) };
    if k != kb {
        return Err(TensorError::Dim {
            op,
            dim: "inner",
            expected: k,
            got: kb,
        });
    }
    Ok(MatmulDims {
        batch: a[..r - 2].iter().product(),
        m,
        k,
        n,
    })
}

/// Batched `a @ b` (or `a @ b^T` with `trans_b`) over equal leading dims.
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let MatmulDims { batch, m, k, n } = matmul_dims(a.shape(), b.shape(), trans_b)?;
    let mut out = vec![T::zero(); batch * m * n];
    let (ad, bd) = (a.data(), b.data());
    parallel::for_each_chunk_mut(&mut out, (m * n).max(1), |i, c| {
        let am = Mat::rm(&ad[i * m * k..(i + 1) * m * k], k);
        let bs = &bd[i * k * n..(i + 1) * k * n];
        let bm = if trans_b { Mat::rm_t(bs, k) } else { Mat::rm(bs, n) };
        gemm(m, k, n, am, bm, T::zero(), c);
    });
    let mut shape = a.shape().to_vec();
    let r = shape.len();
    shape[r - 1] = n;
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn matmul_backward<T: Float>(g: &Tensor<T>, a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> (Tensor<T>, Tensor<T>) {
    let MatmulDims { m, k, n, .. } = matmul_dims(a.shape(), b.shape(), trans_b).expect("validated in forward");
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = vec![T::zero(); a.numel()];
    parallel::for_each_chunk_mut(&mut ga, (m * k).max(1), |i, c| {
        let gm = Mat::rm(&gd[i * m * n..(i + 1) * m * n], n);
        let bs = &bd[i * k * n..(i + 1) * k * n];
        // ga = g @ b^T  (b stored [k,n]) or g @ b (b stored [n,k])
        let bm = if trans_b { Mat::rm(bs, k) } else { Mat::rm_t(bs, n) };
        gemm(m, n, k, gm, bm, T::zero(), c);
    });
    let mut gb = vec![T::zero(); b.numel()];
    parallel::for_each_chunk_mut(&mut gb, (k * n).max(1), |i, c| {
        let am = &ad[i * m * k..(i + 1) * m * k];
        let gs = &gd[i * m * n..(i + 1) * m * n];
        if trans_b {
            // gb[n,k] = g^T @ a
            gemm(n, m, k, Mat::rm_t(gs, n), Mat::rm(am, k), T::zero(), c);
        } else {
            // gb[k,n] = a^T @ g
            gemm(k, m, n, Mat::rm_t(am, k), Mat::rm(gs, n), T::zero(), c);
        }
    });
    (
        Tensor::from_parts(a.shape().to_vec(), ga),
        Tensor::from_parts(b.shape().to_vec(), gb),
    )
}

impl<'g, T: Float> Var<'g, T> {
    /// Affine map over the last axis with weight `[out, in]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let wi = self.same(w)?;
        let bi = b.map(|b| self.same(b)).transpose()?;
        let out = linear(&self.value(), &w.value(), b.map(|b| b.value()).as_deref())?;
        let mut parents = vec![self.id(), wi];
        parents.extend(bi);
        Ok(self.push(out, Op::Linear { x: self.id(), w: wi, b: bi }, &parents))
    }

    /// Batched matrix product over the last two axes.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_impl(other, false)
    }

    /// Batched `self @ other^T`.
    pub fn matmul_t(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'g, T>, trans_b: bool) -> Result<Var<'g, T>> {
        let bi = self.same(other)?;
        let out = matmul(&self.value(), &other.value(), trans_b)?;
        Ok(self.push(
            out,
            Op::MatMul {
                a: self.id(),
                b: bi,
                trans_b,
            },
            &[self.id(), bi],
        ))
    }
}
