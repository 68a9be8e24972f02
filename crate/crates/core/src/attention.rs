//! Multi-head scaled dot-product self-attention over token sets.

use hdc_tensor::{Bound, Float, Var};

use crate::error::{invalid, Result};
use crate::layers::{Builder, Linear};

#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(invalid("attention", format!("width {dim} not divisible by {heads} heads")));
        }
        b.scope(name, |b| {
            Ok(Attention {
                qkv: Linear::new(b, "qkv", dim, 3 * dim, true)?,
                proj: Linear::new(b, "proj", dim, dim, true)?,
                heads,
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>, mask: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        Ok(self.forward_with_weights(p, x, mask)?.0)
    }

    /// `x: [B, T, C]`. `mask: [G, 1, T, T]` is added to the scores of every
    /// group of `G` consecutive sequences. Also returns the attention weights
    /// `[B * heads, T, T]`.
    pub fn forward_with_weights<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        mask: Option<Var<'g, T>>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(invalid("attention", format!("expected [B, T, C], got {s:?}")));
        }
        let (bs, t, c) = (s[0], s[1], s[2]);
        let h = self.heads;
        if c % h != 0 {
            return Err(invalid("attention", format!("width {c} not divisible by {h} heads")));
        }
        let d = c / h;
        let qkv = self
            .qkv
            .forward(p, x)?
            .reshape(&[bs, t, 3, h, d])?
            .permute(&[2, 0, 3, 1, 4])?;
        let part = |i| -> Result<Var<'g, T>> { Ok(qkv.slice(0, i, 1)?.reshape(&[bs * h, t, d])?) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let mut scores = q.matmul_t(k)?.scale(1.0 / (d as f64).sqrt());
        if let Some(m) = mask {
            let groups = m.shape()[0];
            if bs % groups != 0 {
                return Err(invalid("attention", format!("{bs} sequences not a multiple of {groups} mask groups")));
            }
            scores = scores
                .reshape(&[bs / groups, groups, h, t, t])?
                .add(m)?
                .reshape(&[bs * h, t, t])?;
        }
        let attn = scores.softmax(2)?;
        let out = attn
            .matmul(v)?
            .reshape(&[bs, h, t, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[bs, t, c])?;
        Ok((self.proj.forward(p, out)?, attn))
    }
}
