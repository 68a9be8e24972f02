//! Parameter construction and the small layers shared by every block.

use std::fmt::Display;

use hdc_tensor::{Bound, Conv2dOpts, Float, ParamId, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;

/// Registers named parameters under a dotted scope, drawing initial values
/// from one seeded stream.
pub struct Builder<'a> {
    store: &'a mut ParamStore<f32>,
    rng: ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore<f32>, seed: u64) -> Self {
        Builder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            prefix: Vec::new(),
        }
    }

    pub fn scope<R>(&mut self, name: impl Display, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn add(&mut self, leaf: &str, value: Tensor<f32>) -> Result<ParamId> {
        let name = self.full_name(leaf);
        Ok(self.store.add(name, value)?)
    }

    /// Normal samples truncated to two standard deviations.
    pub fn trunc_normal(&mut self, leaf: &str, shape: &[usize], std: f64) -> Result<ParamId> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let z: f64 = self.rng.sample(StandardNormal);
                if z.abs() <= 2.0 {
                    break (z * std) as f32;
                }
            })
            .collect();
        self.add(leaf, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn full(&mut self, leaf: &str, shape: &[usize], value: f32) -> Result<ParamId> {
        self.add(leaf, Tensor::full(shape.to_vec(), value))
    }

    pub fn fill(&mut self, id: ParamId, value: f32) {
        self.store.get_mut(id).data_mut().fill(value);
    }

    pub fn scale(&mut self, id: ParamId, factor: f32) {
        self.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= factor);
    }

    pub fn zeros(&mut self, leaf: &str, shape: &[usize]) -> Result<ParamId> {
        self.full(leaf, shape, 0.0)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(b: &mut Builder, name: &str, fan_in: usize, fan_out: usize, bias: bool) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Linear {
                w: b.trunc_normal("w", &[fan_out, fan_in], 0.02)?,
                b: if bias { Some(b.zeros("b", &[fan_out])?) } else { None },
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.linear(p.var(self.w), self.b.map(|b| p.var(b)))?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub opts: Conv2dOpts,
}

impl Conv {
    /// Kaiming-normal weights (fan-in, ReLU gain), zero bias.
    pub fn new(
        b: &mut Builder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        opts: Conv2dOpts,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = cin / opts.groups * k * k;
        b.scope(name, |b| {
            Ok(Conv {
                w: b.trunc_normal("w", &[cout, cin / opts.groups, k, k], (2.0 / fan_in as f64).sqrt())?,
                b: if bias { Some(b.zeros("b", &[cout])?) } else { None },
                opts,
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.conv2d(p.var(self.w), self.b.map(|b| p.var(b)), self.opts)?)
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Layer norm over the last axis with affine gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(LayerNorm {
                g: b.full("g", &[dim], 1.0)?,
                b: b.zeros("b", &[dim])?,
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        Ok(x.layer_norm(LN_EPS)?.mul(p.var(self.g))?.add(p.var(self.b))?)
    }
}

/// Group norm on `[N, C, H, W]`.
#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub groups: usize,
    pub g: ParamId,
    pub b: ParamId,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, name: &str, channels: usize) -> Result<Self> {
        let groups = if channels.is_multiple_of(4) { 4 } else { 1 };
        b.scope(name, |b| {
            Ok(GroupNorm {
                groups,
                g: b.full("g", &[channels, 1, 1], 1.0)?,
                b: b.zeros("b", &[channels, 1, 1])?,
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let per = s[1] / self.groups * s[2] * s[3];
        let y = x
            .reshape(&[s[0], self.groups, per])?
            .layer_norm(LN_EPS)?
            .reshape(&s)?;
        Ok(y.mul(p.var(self.g))?.add(p.var(self.b))?)
    }
}

/// `[N, C, H, W]` to `[N, H, W, C]`.
pub fn to_tokens<'g, T: Float>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(x.permute(&[0, 2, 3, 1])?)
}

/// `[N, H, W, C]` to `[N, C, H, W]`.
pub fn to_maps<'g, T: Float>(x: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(x.permute(&[0, 3, 1, 2])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use hdc_tensor::Graph;

    #[test]
    fn scoped_names() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 0);
        b.scope("enc", |b| b.scope(0, |b| Linear::new(b, "qkv", 4, 12, true))).unwrap();
        let names: Vec<_> = store.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["enc.0.qkv.w", "enc.0.qkv.b"]);
    }

    #[test]
    fn truncated_init() {
        let mut store = ParamStore::new();
        let mut b = Builder::new(&mut store, 1);
        let id = b.trunc_normal("w", &[1000], 0.02).unwrap();
        assert!(store.get(id).data().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn group_norm_standardizes_groups() {
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut Builder::new(&mut store, 2), "gn", 8).unwrap();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(Tensor::<f32>::randn([1, 8, 3, 3], 2.0, &mut rng));
        let y = gn.forward(&p, x).unwrap().value();
        for grp in y.data().chunks(18) {
            let m: f32 = grp.iter().sum::<f32>() / 18.0;
            assert!(m.abs() < 1e-5);
        }
    }
}
