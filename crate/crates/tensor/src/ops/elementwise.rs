//! Broadcasting binary arithmetic, scalar arithmetic and pointwise activations.

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Op, Var};
use crate::parallel;
use crate::tensor::{numel, Tensor};

const ROWS_PER_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Relu,
    Sigmoid,
    Silu,
    Gelu,
    Softplus,
    Exp,
    Sqrt,
    Square,
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::Broadcast {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed through `out` (rank-aligned on the right), with
/// zero stride on broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let own = crate::tensor::strides(shape);
    (0..r)
        .map(|i| {
            if i + shape.len() < r {
                0
            } else {
                let j = i + shape.len() - r;
                if shape[j] == 1 && out[i] != 1 {
                    0
                } else {
                    own[j]
                }
            }
        })
        .collect()
}

/// Offsets into two broadcast operands for the row `row` (all dims but the last).
#[inline]
fn row_offsets(row: usize, out: &[usize], sa: &[usize], sb: &[usize]) -> (usize, usize) {
    let mut rem = row;
    let (mut oa, mut ob) = (0, 0);
    for d in (0..out.len() - 1).rev() {
        let i = rem % out[d];
        rem /= out[d];
        oa += i * sa[d];
        ob += i * sb[d];
    }
    (oa, ob)
}

fn zip_broadcast<T: Float>(out_shape: &[usize], a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T + Sync + Send) -> Vec<T> {
    let n = numel(out_shape);
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == out_shape && b.shape() == out_shape {
        let mut out = vec![T::zero(); n];
        parallel::for_each_chunk_mut(&mut out, 1 << 14, |ci, chunk| {
            let base = ci << 14;
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = f(ad[base + j], bd[base + j]);
            }
        });
        return out;
    }
    if out_shape.is_empty() {
        return vec![f(ad[0], bd[0])];
    }
    let sa = broadcast_strides(a.shape(), out_shape);
    let sb = broadcast_strides(b.shape(), out_shape);
    let r = out_shape.len();
    let last = out_shape[r - 1];
    let (la, lb) = (sa[r - 1], sb[r - 1]);
    let mut out = vec![T::zero(); n];
    if last == 0 {
        return out;
    }
    parallel::for_each_chunk_mut(&mut out, ROWS_PER_CHUNK * last, |ci, chunk| {
        for (rr, row) in chunk.chunks_mut(last).enumerate() {
            let (oa, ob) = row_offsets(ci * ROWS_PER_CHUNK + rr, out_shape, &sa, &sb);
            for (j, o) in row.iter_mut().enumerate() {
                *o = f(ad[oa + j * la], bd[ob + j * lb]);
            }
        }
    });
    out
}

/// Sums `g` over the dimensions that were broadcast to reach `g`'s shape.
pub fn reduce_to<T: Float>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape.to_vec());
    let gs = g.shape();
    if gs.is_empty() {
        out.data_mut()[0] = g.data()[0];
        return out;
    }
    let s = broadcast_strides(shape, gs);
    let r = gs.len();
    let last = gs[r - 1];
    let ls = s[r - 1];
    let od = out.data_mut();
    for (row, gr) in g.data().chunks(last.max(1)).enumerate() {
        let (o, _) = row_offsets(row, gs, &s, &s);
        for (j, &v) in gr.iter().enumerate() {
            od[o + j * ls] += v;
        }
    }
    out
}

pub fn binary<T: Float>(kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let name = match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    };
    let shape = broadcast_shape(name, a.shape(), b.shape())?;
    let data = match kind {
        BinaryKind::Add => zip_broadcast(&shape, a, b, |x, y| x + y),
        BinaryKind::Sub => zip_broadcast(&shape, a, b, |x, y| x - y),
        BinaryKind::Mul => zip_broadcast(&shape, a, b, |x, y| x * y),
        BinaryKind::Div => zip_broadcast(&shape, a, b, |x, y| x / y),
    };
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn binary_backward<T: Float>(
    kind: BinaryKind,
    g: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let os = out.shape();
    match kind {
        BinaryKind::Add => (reduce_to(g, a.shape()), reduce_to(g, b.shape())),
        BinaryKind::Sub => (reduce_to(g, a.shape()), reduce_to(&g.map(|v| -v), b.shape())),
        BinaryKind::Mul => {
            let ga = Tensor::from_parts(os.to_vec(), zip_broadcast(os, g, b, |x, y| x * y));
            let gb = Tensor::from_parts(os.to_vec(), zip_broadcast(os, g, a, |x, y| x * y));
            (reduce_to(&ga, a.shape()), reduce_to(&gb, b.shape()))
        }
        BinaryKind::Div => {
            let ga = Tensor::from_parts(os.to_vec(), zip_broadcast(os, g, b, |x, y| x / y));
            // d(a/b)/db = -out / b
            let q = Tensor::from_parts(os.to_vec(), zip_broadcast(os, out, b, |o, y| -o / y));
            let gb = Tensor::from_parts(os.to_vec(), zip_broadcast(os, g, &q, |x, y| x * y));
            (reduce_to(&ga, a.shape()), reduce_to(&gb, b.shape()))
        }
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

#[inline]
pub fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Float>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn gelu<T: Float>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Float>(x: T) -> T {
    let k = T::of(GELU_K);
    let c = T::of(GELU_C);
    let half = T::of(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + T::of(3.0) * c * x * x)
}

fn apply<T: Float>(kind: UnaryKind, x: T) -> T {
    match kind {
        UnaryKind::Relu => x.max(T::zero()),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Silu => x * sigmoid(x),
        UnaryKind::Gelu => gelu(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
    }
}

/// Derivative given input `x` and output `y`.
fn derivative<T: Float>(kind: UnaryKind, x: T, y: T) -> T {
    match kind {
        UnaryKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryKind::Sigmoid => y * (T::one() - y),
        UnaryKind::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        UnaryKind::Gelu => gelu_grad(x),
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Exp => y,
        UnaryKind::Sqrt => T::of(0.5) / y,
        UnaryKind::Square => T::of(2.0) * x,
    }
}

pub fn unary<T: Float>(kind: UnaryKind, x: &Tensor<T>) -> Tensor<T> {
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    parallel::for_each_chunk_mut(&mut out, 1 << 14, |ci, chunk| {
        let base = ci << 14;
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = apply(kind, xd[base + j]);
        }
    });
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn unary_backward<T: Float>(kind: UnaryKind, g: &Tensor<T>, x: &Tensor<T>, y: &Tensor<T>) -> Tensor<T> {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .zip(y.data())
        .map(|((&g, &x), &y)| g * derivative(kind, x, y))
        .collect();
    Tensor::from_parts(x.shape().to_vec(), data)
}

// Fallible, so the operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'g, T: Float> Var<'g, T> {
    fn binary(self, kind: BinaryKind, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let b = self.same(other)?;
        let out = binary(kind, &self.value(), &other.value())?;
        Ok(self.push(out, Op::Binary { kind, a: self.id(), b }, &[self.id(), b]))
    }

    /// Broadcasting `self + other`.
    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Add, other)
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Sub, other)
    }

    /// Broadcasting elementwise product.
    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Mul, other)
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(BinaryKind::Div, other)
    }

    pub fn scale(self, factor: f64) -> Var<'g, T> {
        let factor = T::of(factor);
        let out = self.value().map(|v| v * factor);
        self.push(out, Op::Scale { x: self.id(), factor }, &[self.id()])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-1.0)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        let out = self.value().map(|v| v + c);
        self.push(out, Op::AddScalar { x: self.id() }, &[self.id()])
    }

    /// `c - self`.
    pub fn rsub_scalar(self, c: f64) -> Var<'g, T> {
        self.neg().add_scalar(c)
    }

    fn unary(self, kind: UnaryKind) -> Var<'g, T> {
        let out = unary(kind, &self.value());
        self.push(out, Op::Unary { kind, x: self.id() }, &[self.id()])
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(UnaryKind::Relu)
    }
    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(UnaryKind::Sigmoid)
    }
    pub fn silu(self) -> Var<'g, T> {
        self.unary(UnaryKind::Silu)
    }
    /// Tanh-approximated GELU.
    pub fn gelu(self) -> Var<'g, T> {
        self.unary(UnaryKind::Gelu)
    }
    pub fn softplus(self) -> Var<'g, T> {
        self.unary(UnaryKind::Softplus)
    }
    pub fn exp(self) -> Var<'g, T> {
        self.unary(UnaryKind::Exp)
    }
    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(UnaryKind::Sqrt)
    }
    pub fn square(self) -> Var<'g, T> {
        self.unary(UnaryKind::Square)
    }
}
