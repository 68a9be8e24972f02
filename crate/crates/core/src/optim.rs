//! AdamW with decoupled weight decay and a constant learning rate.

use hdc_tensor::{ParamStore, Tensor};

use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore<f32>, weight_decay: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0f32; t.numel()]).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. A non-finite gradient rejects the whole step, leaving
    /// parameters, moments and the counter untouched.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Tensor<f32>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.len() != self.m.len() {
            return Err(invalid("adamw_step", format!("{} gradients for {} parameters", grads.len(), params.len())));
        }
        for (id, g) in params.ids().zip(grads) {
            if g.shape() != params.get(id).shape() {
                return Err(invalid(
                    "adamw_step",
                    format!("gradient {:?} for `{}` {:?}", g.shape(), params.name(id), params.get(id).shape()),
                ));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("gradient of `{}`", params.name(id)),
                    step: self.step + 1,
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let decay = (1.0 - lr * self.weight_decay) as f32;
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64;
                let mm = b1 * *m as f64 + (1.0 - b1) * g;
                let vv = b2 * *v as f64 + (1.0 - b2) * g * g;
                *m = mm as f32;
                *v = vv as f32;
                let upd = lr * (mm / c1) / ((vv / c2).sqrt() + self.eps);
                *w = (*w * decay) - upd as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(v)).unwrap();
        s
    }

    #[test]
    fn first_step_is_unit() {
        let mut p = one(1.0);
        let mut opt = AdamW::new(&p, 0.0);
        opt.step(&mut p, &[Tensor::scalar(1.0)], 1e-3).unwrap();
        assert!((p.tensors()[0].item() - 0.999).abs() < 1e-6);
    }

    #[test]
    fn zero_grad_no_decay_is_noop() {
        let mut p = one(0.3);
        let mut opt = AdamW::new(&p, 0.0);
        for _ in 0..3 {
            opt.step(&mut p, &[Tensor::scalar(0.0)], 1e-3).unwrap();
        }
        assert_eq!(p.tensors()[0].item(), 0.3);
    }

    #[test]
    fn decay_only() {
        let mut p = one(2.0);
        let mut opt = AdamW::new(&p, 0.01);
        let mut want = 2.0f32;
        for _ in 0..4 {
            opt.step(&mut p, &[Tensor::scalar(0.0)], 0.1).unwrap();
            want *= 1.0 - 0.1 * 0.01;
        }
        assert!((p.tensors()[0].item() - want).abs() < 1e-7);
    }

    #[test]
    fn non_finite_rejected() {
        let mut p = one(1.0);
        let mut opt = AdamW::new(&p, 0.01);
        let e = opt.step(&mut p, &[Tensor::scalar(f32::NAN)], 1e-3).unwrap_err();
        assert!(e.to_string().contains("`p`"));
        assert_eq!(opt.steps(), 0);
        assert_eq!(p.tensors()[0].item(), 1.0);
    }
}
