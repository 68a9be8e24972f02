//! Masked depth regression loss and the surface-normal agreement term.
//!
//! Depth maps are `[N, 1, H, W]`; masks are 0/1 tensors of the same shape.
//! A pixel contributes when its mask is set and its ground truth is positive.

use hdc_tensor::{Float, Graph, Tensor, Var};

use crate::error::{invalid, Result};

/// Mask restricted to positive ground truth, and its population.
pub fn effective_mask<T: Float>(gt: &Tensor<T>, mask: &Tensor<T>) -> Result<(Tensor<T>, usize)> {
    if gt.shape() != mask.shape() {
        return Err(invalid("loss", format!("gt {:?} and mask {:?} differ", gt.shape(), mask.shape())));
    }
    let data: Vec<T> = gt
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&g, &m)| if m > T::zero() && g > T::zero() { T::one() } else { T::zero() })
        .collect();
    let n = data.iter().filter(|&&v| v > T::zero()).count();
    Ok((Tensor::new(gt.shape().to_vec(), data)?, n))
}

fn masked_mean<'g, T: Float>(g: &'g Graph<T>, per_pixel: Var<'g, T>, gt: &Tensor<T>, mask: &Tensor<T>, op: &'static str) -> Result<Var<'g, T>> {
    let (m, n) = effective_mask(gt, mask)?;
    if n == 0 {
        return Err(invalid(op, "empty mask"));
    }
    Ok(per_pixel.mul(g.constant(m))?.sum_all().scale(1.0 / n as f64))
}

fn check_pred<T: Float>(op: &'static str, pred: Var<'_, T>, gt: &Tensor<T>) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(invalid(op, format!("prediction {:?} and gt {:?} differ", pred.shape(), gt.shape())));
    }
    Ok(())
}

/// Mean of `(d - d*)^2` over the mask.
pub fn loss_mse<'g, T: Float>(pred: Var<'g, T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<Var<'g, T>> {
    check_pred("loss_mse", pred, gt)?;
    let g = pred.graph();
    let diff = pred.sub(g.constant(gt.clone()))?;
    masked_mean(g, diff.square(), gt, mask, "loss_mse")
}

/// Finite difference along `axis`: central inside, one-sided at the borders.
fn gradient<'g, T: Float>(d: Var<'g, T>, axis: usize) -> Result<Var<'g, T>> {
    let n = d.shape()[axis];
    if n < 3 {
        return Err(invalid("surface_normals", format!("needs at least 3 pixels along axis {axis}, got {n}")));
    }
    let first = d.slice(axis, 1, 1)?.sub(d.slice(axis, 0, 1)?)?;
    let mid = d.slice(axis, 2, n - 2)?.sub(d.slice(axis, 0, n - 2)?)?.scale(0.5);
    let last = d.slice(axis, n - 1, 1)?.sub(d.slice(axis, n - 2, 1)?)?;
    Ok(Var::concat(&[first, mid, last], axis)?)
}

/// Depth gradients `(dD/dx, dD/dy)` in pixel units.
pub fn depth_gradients<'g, T: Float>(d: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let nd = d.shape().len();
    if nd < 2 {
        return Err(invalid("surface_normals", "depth needs at least 2 dimensions"));
    }
    Ok((gradient(d, nd - 1)?, gradient(d, nd - 2)?))
}

/// Unit normals `(-dx, -dy, 1) / norm`, `[N, 1, H, W] -> [N, 3, H, W]`.
pub fn surface_normals<'g, T: Float>(d: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = d.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(invalid("surface_normals", format!("expected [N, 1, H, W], got {s:?}")));
    }
    let (dx, dy) = depth_gradients(d)?;
    let inv = dx.square().add(dy.square())?.add_scalar(1.0).sqrt();
    let one = d.graph().constant(Tensor::ones(s.clone()));
    Ok(Var::concat(&[dx.neg().div(inv)?, dy.neg().div(inv)?, one.div(inv)?], 1)?)
}

/// Mean of `1 - n(D) . n(D*)` over the mask, in `[0, 2]`.
pub fn loss_normal<'g, T: Float>(pred: Var<'g, T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<Var<'g, T>> {
    check_pred("loss_normal", pred, gt)?;
    let g = pred.graph();
    let (px, py) = depth_gradients(pred)?;
    let (gx, gy) = {
        let gg = Graph::new();
        let (x, y) = depth_gradients(gg.constant(gt.clone()))?;
        let (x, y) = (x.value(), y.value());
        (g.constant((*x).clone()), g.constant((*y).clone()))
    };
    let dot = px.mul(gx)?.add(py.mul(gy)?)?.add_scalar(1.0);
    let np = px.square().add(py.square())?.add_scalar(1.0);
    let ng = gx.square().add(gy.square())?.add_scalar(1.0);
    let cos = dot.div(np.mul(ng)?.sqrt())?;
    masked_mean(g, cos.rsub_scalar(1.0), gt, mask, "loss_normal")
}

pub struct LossParts<'g, T: Float> {
    pub mse: Var<'g, T>,
    pub normal: Var<'g, T>,
    pub total: Var<'g, T>,
}

/// `L_mse + lambda * L_normal`.
pub fn total_loss<'g, T: Float>(pred: Var<'g, T>, gt: &Tensor<T>, mask: &Tensor<T>, lambda: f64) -> Result<LossParts<'g, T>> {
    if !(lambda >= 0.0) {
        return Err(invalid("total_loss", format!("lambda must be non-negative, got {lambda}")));
    }
    let mse = loss_mse(pred, gt, mask)?;
    let normal = loss_normal(pred, gt, mask)?;
    let total = if lambda == 0.0 { mse } else { mse.add(normal.scale(lambda))? };
    Ok(LossParts { mse, normal, total })
}
