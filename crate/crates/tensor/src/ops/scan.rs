//! Selective scan: the per-token discretized diagonal state-space recurrence
//!
//! ```text
//! h_t[e,s] = exp(delta_t[e] * A[e,s]) * h_{t-1}[e,s] + delta_t[e] * B_t[s] * x_t[e]
//! y_t[e]   = sum_s C_t[s] * h_t[e,s]
//! ```
//!
//! with `h_0 = 0`. The recurrence runs sequentially along the token axis and
//! in parallel across the batch.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::graph::{Op, Var};
use crate::parallel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub batch: usize,
    pub len: usize,
    pub width: usize,
    pub state: usize,
}

pub fn scan_dims(x: &[usize], delta: &[usize], a: &[usize], b: &[usize], c: &[usize]) -> Result<ScanDims> {
    let op = "selective_scan";
    if x.len() != 3 {
        return Err(TensorError::Rank {
            op,
            expected: 3,
            shape: x.to_vec(),
        });
    }
    let (n, l, e) = (x[0], x[1], x[2]);
    if delta != x {
        return Err(TensorError::Invalid {
            op,
            msg: format!("delta shape {delta:?} must equal x shape {x:?}"),
        });
    }
    if a.len() != 2 || a[0] != e {
        return Err(TensorError::Invalid {
            op,
            msg: format!("A shape {a:?} must be [{e}, S]"),
        });
    }
    let s = a[1];
    for (name, t) in [("B", b), ("C", c)] {
        if t != [n, l, s] {
            return Err(TensorError::Invalid {
                op,
                msg: format!("{name} shape {t:?} must be [{n}, {l}, {s}]"),
            });
        }
    }
    Ok(ScanDims {
        batch: n,
        len: l,
        width: e,
        state: s,
    })
}

static FAULT: AtomicBool = AtomicBool::new(false);

/// Deliberately breaks the forward recurrence (drops `delta` from the input
/// term) for the whole process, so checks can prove they catch it.
#[doc(hidden)]
pub fn inject_fault(on: bool) {
    FAULT.store(on, Ordering::SeqCst);
}

/// Returns `y` and every post-update state `h_t` (`[N, L, E, S]`).
pub fn selective_scan<T: Float>(
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<T>)> {
    let d = scan_dims(x.shape(), delta.shape(), a.shape(), b.shape(), c.shape())?;
    let ScanDims {
        batch: _,
        len,
        width: e,
        state: s,
    } = d;
    let per = len * e * s;
    let mut states = vec![T::zero(); d.batch * per];
    let mut y = vec![T::zero(); x.numel()];
    let (xd, dd, ad, bd, cd) = (x.data(), delta.data(), a.data(), b.data(), c.data());
    let fault = FAULT.load(Ordering::SeqCst);
    // Both outputs are chunked per batch element so each task owns its slices.
    let ys: Vec<(Vec<T>, Vec<T>)> = parallel::map(d.batch, |n| {
        let mut h = vec![T::zero(); e * s];
        let mut yn = vec![T::zero(); len * e];
        let mut hs = vec![T::zero(); per];
        for t in 0..len {
            let row = (n * len + t) * e;
            let bt = &bd[(n * len + t) * s..(n * len + t + 1) * s];
            let ct = &cd[(n * len + t) * s..(n * len + t + 1) * s];
            for ei in 0..e {
                let dt = dd[row + ei];
                let xv = xd[row + ei];
                let gain = if fault { T::one() } else { dt };
                let mut acc = T::zero();
                for si in 0..s {
                    let k = ei * s + si;
                    h[k] = (dt * ad[k]).exp() * h[k] + gain * bt[si] * xv;
                    acc += ct[si] * h[k];
                }
                yn[t * e + ei] = acc;
            }
            hs[t * e * s..(t + 1) * e * s].copy_from_slice(&h);
        }
        (yn, hs)
    });
    for (n, (yn, hs)) in ys.into_iter().enumerate() {
        y[n * len * e..(n + 1) * len * e].copy_from_slice(&yn);
        states[n * per..(n + 1) * per].copy_from_slice(&hs);
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), y), states))
}

pub(crate) struct ScanGrads<T> {
    pub x: Tensor<T>,
    pub delta: Tensor<T>,
    pub a: Tensor<T>,
    pub b: Tensor<T>,
    pub c: Tensor<T>,
}

/// Backpropagation through time over the saved states.
pub(crate) fn selective_scan_backward<T: Float>(
    gy: &Tensor<T>,
    x: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: &Tensor<T>,
    states: &[T],
) -> ScanGrads<T> {
    let d = scan_dims(x.shape(), delta.shape(), a.shape(), b.shape(), c.shape()).expect("validated in forward");
    let (len, e, s) = (d.len, d.width, d.state);
    let per = len * e * s;
    let (xd, dd, ad, bd, cd, gd) = (x.data(), delta.data(), a.data(), b.data(), c.data(), gy.data());

    struct Part<T> {
        gx: Vec<T>,
        gdelta: Vec<T>,
        ga: Vec<T>,
        gb: Vec<T>,
        gc: Vec<T>,
    }
    let parts: Vec<Part<T>> = parallel::map(d.batch, |n| {
        let hs = &states[n * per..(n + 1) * per];
        let mut p = Part {
            gx: vec![T::zero(); len * e],
            gdelta: vec![T::zero(); len * e],
            ga: vec![T::zero(); e * s],
            gb: vec![T::zero(); len * s],
            gc: vec![T::zero(); len * s],
        };
        let mut gh = vec![T::zero(); e * s];
        for t in (0..len).rev() {
            let row = (n * len + t) * e;
            let srow = (n * len + t) * s;
            let h_t = &hs[t * e * s..(t + 1) * e * s];
            for ei in 0..e {
                let g = gd[row + ei];
                let dt = dd[row + ei];
                let xv = xd[row + ei];
                let mut g_dt = T::zero();
                let mut g_x = T::zero();
                for si in 0..s {
                    let k = ei * s + si;
                    p.gc[t * s + si] += g * h_t[k];
                    gh[k] += g * cd[srow + si];
                    let h_prev = if t > 0 { hs[(t - 1) * e * s + k] } else { T::zero() };
                    let decay = (dt * ad[k]).exp();
                    let gdecay = gh[k] * h_prev * decay;
                    g_dt += gdecay * ad[k] + gh[k] * bd[srow + si] * xv;
                    p.ga[k] += gdecay * dt;
                    p.gb[t * s + si] += gh[k] * dt * xv;
                    g_x += gh[k] * dt * bd[srow + si];
                    gh[k] *= decay;
                }
                p.gdelta[t * e + ei] = g_dt;
                p.gx[t * e + ei] = g_x;
            }
        }
        p
    });

    let mut gx = Vec::with_capacity(x.numel());
    let mut gdelta = Vec::with_capacity(x.numel());
    let mut gb = Vec::with_capacity(b.numel());
    let mut gc = Vec::with_capacity(c.numel());
    let mut ga = vec![T::zero(); a.numel()];
    for p in parts {
        gx.extend(p.gx);
        gdelta.extend(p.gdelta);
        gb.extend(p.gb);
        gc.extend(p.gc);
        for (acc, v) in ga.iter_mut().zip(p.ga) {
            *acc += v;
        }
    }
    ScanGrads {
        x: Tensor::from_parts(x.shape().to_vec(), gx),
        delta: Tensor::from_parts(delta.shape().to_vec(), gdelta),
        a: Tensor::from_parts(a.shape().to_vec(), ga),
        b: Tensor::from_parts(b.shape().to_vec(), gb),
        c: Tensor::from_parts(c.shape().to_vec(), gc),
    }
}

impl<'g, T: Float> Var<'g, T> {
    /// Runs the selective scan with `self` as the input sequence `x: [N, L, E]`.
    /// `delta: [N, L, E]`, `a: [E, S]`, `b, c: [N, L, S]`.
    pub fn selective_scan(self, delta: Var<'g, T>, a: Var<'g, T>, b: Var<'g, T>, c: Var<'g, T>) -> Result<Var<'g, T>> {
        let ids = [
            self.id(),
            self.same(delta)?,
            self.same(a)?,
            self.same(b)?,
            self.same(c)?,
        ];
        let (y, states) = selective_scan(&self.value(), &delta.value(), &a.value(), &b.value(), &c.value())?;
        if !y.is_finite() {
            return Err(TensorError::NonFinite { op: "selective_scan" });
        }
        Ok(self.push(
            y,
            Op::SelectiveScan {
                x: ids[0],
                delta: ids[1],
                a: ids[2],
                b: ids[3],
                c: ids[4],
                states,
            },
            &ids,
        ))
    }
}
