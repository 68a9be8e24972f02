//! Central finite-difference gradient checking in `f64`.
//!
//! The checked function maps input vars to any tensor; it is contracted
//! against fixed random weights to a scalar so every output element
//! contributes. Numeric derivatives use only forward evaluations.

use rand::seq::index::sample;
use rand::SeedableRng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradcheckOpts {
    /// Central-difference step.
    pub eps: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Denominator floor for the relative error of near-zero gradients.
    pub floor: f64,
    /// Coordinates checked per input; inputs at most this large are checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradcheckOpts {
    fn default() -> Self {
        GradcheckOpts {
            eps: 1e-3,
            tol: 1e-4,
            floor: 1e-5,
            max_coords: 64,
            seed: 0x5eed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Worst {
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
    pub checked: usize,
    /// Coordinates near a non-differentiable point, confirmed only by a
    /// one-sided or finer-step difference; excluded from `max_rel_err`.
    pub kinks: usize,
}

impl GradcheckReport {
    /// Passes when the error is within `tol` and at least half of the
    /// coordinates were confirmed at the nominal step.
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol && self.kinks * 2 <= self.checked && self.checked > 0
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Whether `a` is explained by a non-differentiable point near `x`, given
/// `f(x)`, `f(x +- h)` and `f(x +- 2h)`: it must match the central slope at
/// this finer step or one of the second-order one-sided slopes.
fn resolves_kink(a: f64, f0: f64, (p1, m1): (f64, f64), (p2, m2): (f64, f64), h: f64, opts: &GradcheckOpts) -> bool {
    let central = (p1 - m1) / (2.0 * h);
    let fwd = (4.0 * p1 - 3.0 * f0 - p2) / (2.0 * h);
    let bwd = (3.0 * f0 - 4.0 * m1 + m2) / (2.0 * h);
    let best = [central, fwd, bwd].into_iter().map(|n| rel_err(a, n, opts.floor)).fold(f64::INFINITY, f64::min);
    best < opts.tol
}

/// Checks analytic gradients of `f` w.r.t. every input against central
/// differences.
pub fn gradcheck<F>(inputs: &[Tensor<f64>], f: F, opts: &GradcheckOpts) -> Result<GradcheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);

    let g = Graph::new();
    let vars: Vec<_> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&g, &vars)?;
    let weights = if out.value().numel() == 1 {
        Tensor::ones(out.shape())
    } else {
        Tensor::<f64>::randn(out.shape(), 1.0, &mut rng)
    };
    let w = g.constant(weights.clone());
    let loss = out.mul(w)?.sum_all();
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<_> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&g, &vars)?;
        let v = out.value();
        Ok(v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };
    // Returns the central difference and the (forward, backward) one-sided ones.
    let numeric = |work: &mut Vec<Tensor<f64>>, i: usize, k: usize, h: f64| -> Result<(f64, f64, f64)> {
        let orig = work[i].data()[k];
        work[i].data_mut()[k] = orig + h;
        let fp = eval(work)?;
        work[i].data_mut()[k] = orig - h;
        let fm = eval(work)?;
        work[i].data_mut()[k] = orig;
        Ok(((fp - fm) / (2.0 * h), fp, fm))
    };

    let mut report = GradcheckReport::default();
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        let n = inputs[i].numel();
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let a = analytic[i].data()[k];
            let (n1, fp, fm) = numeric(&mut work, i, k, opts.eps)?;
            report.checked += 1;
            let mut err = rel_err(a, n1, opts.floor);
            let mut estimate = n1;
            if err >= opts.tol {
                let (n2, fp2, fm2) = numeric(&mut work, i, k, opts.eps / 2.0)?;
                let f0 = eval(&work)?;
                // Smooth but strongly curved: cancel the O(eps^2) term.
                estimate = (4.0 * n2 - n1) / 3.0;
                err = rel_err(a, estimate, opts.floor);
                if err >= opts.tol && resolves_kink(a, f0, (fp2, fm2), (fp, fm), opts.eps / 2.0, opts) {
                    report.kinks += 1;
                    continue;
                }
                if err >= opts.tol {
                    // Several kinks within one step: shrink it until the
                    // point's own one-sided slopes are isolated.
                    let mut h = opts.eps / 4.0;
                    let mut resolved = false;
                    while !resolved && h >= opts.eps / 256.0 {
                        let (_, p1, m1) = numeric(&mut work, i, k, h)?;
                        let (_, p2, m2) = numeric(&mut work, i, k, 2.0 * h)?;
                        resolved = resolves_kink(a, f0, (p1, m1), (p2, m2), h, opts);
                        h /= 2.0;
                    }
                    if resolved {
                        report.kinks += 1;
                        continue;
                    }
                }
            }
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Worst {
                    input: i,
                    coord: k,
                    analytic: a,
                    numeric: estimate,
                });
            }
        }
    }
    Ok(report)
}

/// A differentiable function of its inputs, checkable by [`gradcheck`].
pub type CaseFn = Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> + Send + Sync>;

pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    pub f: CaseFn,
}

impl Case {
    fn new<F>(name: &'static str, inputs: Vec<Tensor<f64>>, f: F) -> Self
    where
        F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>> + Send + Sync + 'static,
    {
        Case {
            name,
            inputs,
            f: Box::new(f),
        }
    }

    pub fn run(&self, opts: &GradcheckOpts) -> Result<GradcheckReport> {
        gradcheck(&self.inputs, &self.f, opts)
    }
}

/// One small case per differentiable primitive, inputs drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    use crate::ops::conv::Conv2dOpts;
    use crate::ops::shape::{PadMode, UpsampleMode};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: &[usize]| Tensor::<f64>::randn(shape.to_vec(), 1.0, &mut rng);
    let (a, b) = (randn(&[2, 3, 4]), randn(&[3, 1]));
    let x = randn(&[3, 5]);
    let (lx, lw, lb) = (randn(&[2, 3, 5]), randn(&[4, 5]), randn(&[4]));
    let (ma, mb, mt) = (randn(&[2, 3, 4]), randn(&[2, 4, 5]), randn(&[2, 6, 4]));
    let (cx, cw, cb) = (randn(&[2, 4, 6, 5]), randn(&[6, 2, 3, 3]), randn(&[6]));
    let (sx, sw, pw) = (randn(&[1, 4, 6, 4]), randn(&[3, 4, 2, 2]), randn(&[3, 4, 1, 1]));
    let r = randn(&[2, 3, 4]);
    let (px, py) = (randn(&[2, 3, 5, 4]), randn(&[2, 2, 5, 4]));
    let (qx, qb, qc) = (randn(&[2, 6, 4]), randn(&[2, 6, 3]), randn(&[2, 6, 3]));
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 1);
    let pos_b = Tensor::uniform([3, 1], 0.5, 2.0, &mut rng);
    let pos_x = Tensor::uniform([3, 5], 0.5, 2.0, &mut rng);
    let qd = Tensor::uniform([2, 6, 4], 0.1, 1.0, &mut rng);
    let qa = Tensor::uniform([4, 3], -1.5, -0.2, &mut rng);

    vec![
        Case::new("add", vec![a.clone(), b.clone()], |_, v| v[0].add(v[1])),
        Case::new("sub", vec![a.clone(), b.clone()], |_, v| v[0].sub(v[1])),
        Case::new("mul", vec![a.clone(), b], |_, v| v[0].mul(v[1])),
        Case::new("div", vec![a, pos_b], |_, v| v[0].div(v[1])),
        Case::new("relu", vec![x.clone()], |_, v| Ok(v[0].relu())),
        Case::new("sigmoid", vec![x.clone()], |_, v| Ok(v[0].sigmoid())),
        Case::new("silu", vec![x.clone()], |_, v| Ok(v[0].silu())),
        Case::new("gelu", vec![x.clone()], |_, v| Ok(v[0].gelu())),
        Case::new("softplus", vec![x.clone()], |_, v| Ok(v[0].softplus())),
        Case::new("exp", vec![x.clone()], |_, v| Ok(v[0].exp())),
        Case::new("square", vec![x.clone()], |_, v| Ok(v[0].square())),
        Case::new("scale", vec![x], |_, v| Ok(v[0].scale(-2.5).add_scalar(1.0).rsub_scalar(3.0).neg())),
        Case::new("sqrt", vec![pos_x], |_, v| Ok(v[0].sqrt())),
        Case::new("linear", vec![lx.clone(), lw.clone(), lb], |_, v| v[0].linear(v[1], Some(v[2]))),
        Case::new("linear_nobias", vec![lx, lw], |_, v| v[0].linear(v[1], None)),
        Case::new("matmul", vec![ma.clone(), mb], |_, v| v[0].matmul(v[1])),
        Case::new("matmul_t", vec![ma, mt], |_, v| v[0].matmul_t(v[1])),
        Case::new("conv2d_grouped", vec![cx.clone(), cw, cb], |_, v| {
            v[0].conv2d(v[1], Some(v[2]), Conv2dOpts::new(1, 1).groups(2))
        }),
        Case::new("conv2d_strided", vec![sx, sw], |_, v| v[0].conv2d(v[1], None, Conv2dOpts::new(2, 0))),
        Case::new("conv2d_pointwise", vec![cx, pw], |_, v| v[0].conv2d(v[1], None, Conv2dOpts::default())),
        Case::new("sum_axis", vec![r.clone()], |_, v| v[0].sum_axis(1, false)),
        Case::new("mean_axis", vec![r.clone()], |_, v| v[0].mean_axis(2, true)),
        Case::new("max_axis", vec![r.clone()], |_, v| v[0].max_axis(0, false)),
        Case::new("sum_all", vec![r.clone()], |_, v| Ok(v[0].sum_all())),
        Case::new("mean_all", vec![r.clone()], |_, v| Ok(v[0].mean_all())),
        Case::new("softmax", vec![r.clone()], |_, v| v[0].softmax(2)),
        Case::new("softmax_inner", vec![r.clone()], |_, v| v[0].softmax(1)),
        Case::new("layer_norm", vec![r], |_, v| v[0].layer_norm(1e-5)),
        Case::new("global_avg_pool", vec![px.clone()], |_, v| v[0].global_avg_pool()),
        Case::new("global_max_pool", vec![px.clone()], |_, v| v[0].global_max_pool()),
        Case::new("adaptive_avg_pool", vec![px.clone()], |_, v| v[0].adaptive_avg_pool(3, 2)),
        Case::new("channel_mean", vec![px.clone()], |_, v| v[0].channel_mean()),
        Case::new("channel_max", vec![px.clone()], |_, v| v[0].channel_max()),
        Case::new("reshape", vec![px.clone()], |_, v| v[0].reshape(&[6, 20])),
        Case::new("permute", vec![px.clone()], |_, v| v[0].permute(&[0, 2, 3, 1])),
        Case::new("concat", vec![px.clone(), py], |_, v| Var::concat(&[v[0], v[1]], 1)),
        Case::new("slice", vec![px.clone()], |_, v| v[0].slice(2, 1, 3)),
        Case::new("roll", vec![px.clone()], |_, v| v[0].roll(3, 3)),
        Case::new("pad2d_zero", vec![px.clone()], |_, v| v[0].pad2d([1, 2, 0, 3], PadMode::Zero)),
        Case::new("pad2d_replicate", vec![px.clone()], |_, v| v[0].pad2d([0, 3, 1, 2], PadMode::Replicate)),
        Case::new("upsample_nearest", vec![px.clone()], |_, v| v[0].upsample2x(UpsampleMode::Nearest)),
        Case::new("upsample_bilinear", vec![px], |_, v| v[0].upsample2x(UpsampleMode::Bilinear)),
        Case::new("selective_scan", vec![qx, qd, qa, qb, qc], |_, v| {
            v[0].selective_scan(v[1], v[2], v[3], v[4])
        }),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_wrong_gradient() {
        // Detaching one factor halves the analytic gradient of x².
        let x = Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        let r = gradcheck(
            &[x],
            |g, v| {
                let frozen = g.constant((*v[0].value()).clone());
                v[0].mul(frozen)
            },
            &GradcheckOpts::default(),
        )
        .unwrap();
        assert!(!r.passed(1e-4));
        assert!((r.max_rel_err - 0.5).abs() < 1e-6, "{r:?}");
    }

    #[test]
    fn accepts_correct_gradient() {
        let x = Tensor::from_f64([3], &[0.5, -1.0, 2.0]).unwrap();
        let r = gradcheck(&[x], |_, v| Ok(v[0].square().exp()), &GradcheckOpts::default()).unwrap();
        assert!(r.passed(1e-4), "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn flags_kinks() {
        let x = Tensor::from_f64([4], &[0.0, 1.0, -1.0, 2.0]).unwrap();
        let r = gradcheck(&[x], |_, v| Ok(v[0].relu()), &GradcheckOpts::default()).unwrap();
        assert_eq!(r.kinks, 1);
        assert!(r.max_rel_err < 1e-9);
    }

    #[test]
    fn wrong_gradient_near_kink_still_fails() {
        // relu(x + 3e-4) * (1 + x) with the second factor detached: the
        // kink lies inside the step, but no slope equals the analytic 1.
        let x = Tensor::from_f64([1], &[0.0]).unwrap();
        let r = gradcheck(
            &[x],
            |g, v| {
                let frozen = g.constant(v[0].value().map(|t| 1.0 + t));
                v[0].add_scalar(3e-4).relu().mul(frozen)
            },
            &GradcheckOpts::default(),
        )
        .unwrap();
        assert!(!r.passed(1e-4), "{r:?}");
        assert_eq!(r.kinks, 0);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(0.0, 1e-9, 1e-6), 1e-3);
        assert_eq!(rel_err(2.0, 1.0, 1e-6), 0.5);
    }
}
