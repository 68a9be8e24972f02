//! Shallow channel-excitation fusion and the bottleneck attention + state-space fusion.

use hdc_tensor::{Bound, Conv2dOpts, Float, ParamId, PadMode, Var};

use crate::attention::Attention;
use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::layers::{to_maps, to_tokens, Builder, LayerNorm, Linear};

/// Four `C -> C/4` squeeze branches and a `C -> C` expansion.
#[derive(Clone, Debug)]
pub struct SmfmParams {
    pub squeeze: [Linear; 4],
    pub expand: Linear,
}

impl SmfmParams {
    pub fn new(b: &mut Builder, name: &str, c: usize) -> Result<Self> {
        if c == 0 || !c.is_multiple_of(4) {
            return Err(invalid("channel_excitation", format!("channels {c} not divisible by 4")));
        }
        b.scope(name, |b| {
            let mut sq = Vec::with_capacity(4);
            for k in 1..=4 {
                sq.push(Linear::new(b, &format!("w{k}"), c, c / 4, true)?);
            }
            Ok(SmfmParams {
                squeeze: sq.try_into().expect("four branches"),
                expand: Linear::new(b, "w5", c, c, true)?,
            })
        })
    }
}

/// `sigmoid(W5 concat_k relu(W_k GAP(F)))`, shaped `[N, C, 1, 1]`.
pub fn channel_excitation<'g, T: Float>(pr: &SmfmParams, p: &Bound<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = f.shape();
    let z = f.global_avg_pool()?.reshape(&[s[0], s[1]])?;
    let branches = pr
        .squeeze
        .iter()
        .map(|w| Ok(w.forward(p, z)?.relu()))
        .collect::<Result<Vec<_>>>()?;
    let sq = Var::concat(&branches, 1)?;
    Ok(pr.expand.forward(p, sq)?.sigmoid().reshape(&[s[0], s[1], 1, 1])?)
}

/// Separate excitation parameters per modality.
#[derive(Clone, Debug)]
pub struct Smfm {
    pub rgb: SmfmParams,
    pub depth: SmfmParams,
}

impl Smfm {
    pub fn new(b: &mut Builder, name: impl std::fmt::Display, c: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Smfm {
                rgb: SmfmParams::new(b, "r", c)?,
                depth: SmfmParams::new(b, "d", c)?,
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, fr: Var<'g, T>, fd: Var<'g, T>) -> Result<Var<'g, T>> {
        same_shape("smfm", fr, fd)?;
        let sr = channel_excitation(&self.rgb, p, fr)?;
        let sd = channel_excitation(&self.depth, p, fd)?;
        Ok(fr.mul(sr)?.add(fd.mul(sd)?)?)
    }
}

fn same_shape<T: Float>(op: &'static str, a: Var<'_, T>, b: Var<'_, T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(invalid(op, format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Fuses two branches with `smfm` when present, else by plain addition.
pub fn fuse<'g, T: Float>(smfm: Option<&Smfm>, p: &Bound<'g, T>, fr: Var<'g, T>, fd: Var<'g, T>) -> Result<Var<'g, T>> {
    match smfm {
        Some(m) => m.forward(p, fr, fd),
        None => {
            same_shape("fuse", fr, fd)?;
            Ok(fr.add(fd)?)
        }
    }
}

/// `LN(F + MHA(F))` over `[N, L, C]` tokens.
#[derive(Clone, Debug)]
pub struct MhaResidual {
    pub attn: Attention,
    pub ln: LayerNorm,
}

impl MhaResidual {
    pub fn new(b: &mut Builder, c: usize, heads: usize) -> Result<Self> {
        b.scope("mha", |b| {
            Ok(MhaResidual {
                attn: Attention::new(b, "attn", c, heads)?,
                ln: LayerNorm::new(b, "ln", c)?,
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = self.attn.forward(p, f, None)?;
        self.ln.forward(p, f.add(a)?)
    }
}

/// Gated state-space block:
/// `W_down(SSM(SiLU(conv(W_up F))) * SiLU(W_up F))`.
#[derive(Clone, Debug)]
pub struct SsmBlock {
    pub up: Linear,
    /// Causal depthwise kernel `[E, 1, 1, k]` and bias `[E]`.
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt: Linear,
    pub b_proj: Linear,
    pub c_proj: Linear,
    /// `A = -softplus(a_raw)`, `[E, S]`.
    pub a_raw: ParamId,
    pub down: Linear,
    pub kernel: usize,
}

/// Step size at initialization; with `A = -1` it gives `exp(dt * A) = 0.9`.
const DT_INIT: f64 = 0.105_360_515_657_826_3;

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

impl SsmBlock {
    pub fn new(b: &mut Builder, c: usize, e: usize, s: usize, kernel: usize) -> Result<Self> {
        b.scope("ssm", |b| {
            let up = Linear::new(b, "up", c, e, false)?;
            let conv_w = b.trunc_normal("conv_w", &[e, 1, 1, kernel], (1.0 / kernel as f64).sqrt())?;
            let conv_b = b.zeros("conv_b", &[e])?;
            let dt = Linear::new(b, "dt", e, e, true)?;
            b.fill(dt.b.expect("dt bias"), softplus_inv(DT_INIT) as f32);
            let b_proj = Linear::new(b, "b", e, s, false)?;
            let c_proj = Linear::new(b, "c", e, s, false)?;
            let a: Vec<f32> = (0..e * s).map(|k| softplus_inv((k % s + 1) as f64) as f32).collect();
            let a_raw = b.add("a_raw", hdc_tensor::Tensor::new(vec![e, s], a)?)?;
            let down = Linear::new(b, "down", e, c, false)?;
            Ok(SsmBlock {
                up,
                conv_w,
                conv_b,
                dt,
                b_proj,
                c_proj,
                a_raw,
                down,
                kernel,
            })
        })
    }

    /// `A` as used by the recurrence; strictly negative.
    pub fn a<'g, T: Float>(&self, p: &Bound<'g, T>) -> Var<'g, T> {
        p.var(self.a_raw).softplus().neg()
    }

    /// Depthwise convolution along tokens that only looks backwards.
    pub fn causal_conv<'g, T: Float>(&self, p: &Bound<'g, T>, u: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = u.shape();
        let (n, l, e) = (s[0], s[1], s[2]);
        let y = u
            .permute(&[0, 2, 1])?
            .reshape(&[n, e, 1, l])?
            .pad2d([0, 0, self.kernel - 1, 0], PadMode::Zero)?
            .conv2d(p.var(self.conv_w), Some(p.var(self.conv_b)), Conv2dOpts::default().groups(e))?;
        Ok(y.reshape(&[n, e, l])?.permute(&[0, 2, 1])?)
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let u = self.up.forward(p, f)?;
        let x = self.causal_conv(p, u)?.silu();
        let delta = self.dt.forward(p, x)?.softplus();
        let bm = self.b_proj.forward(p, x)?;
        let cm = self.c_proj.forward(p, x)?;
        let y = x.selective_scan(delta, self.a(p), bm, cm)?;
        self.down.forward(p, y.mul(u.silu())?)
    }
}

/// `LN(F + W2 GELU(W1 F))` with hidden width `4C`.
#[derive(Clone, Debug)]
pub struct FfnResidual {
    pub fc1: Linear,
    pub fc2: Linear,
    pub ln: LayerNorm,
}

impl FfnResidual {
    pub fn new(b: &mut Builder, c: usize) -> Result<Self> {
        b.scope("ffn", |b| {
            Ok(FfnResidual {
                fc1: Linear::new(b, "fc1", c, 4 * c, true)?,
                fc2: Linear::new(b, "fc2", 4 * c, c, true)?,
                ln: LayerNorm::new(b, "ln", c)?,
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
        let m = self.fc2.forward(p, self.fc1.forward(p, f)?.gelu())?;
        self.ln.forward(p, f.add(m)?)
    }
}

#[derive(Clone, Debug)]
pub struct Btmfm {
    pub smfm: Option<Smfm>,
    pub mha: MhaResidual,
    pub ssm: SsmBlock,
    pub ffn: FfnResidual,
}

impl Btmfm {
    pub fn new(b: &mut Builder, cfg: &ModelConfig, c: usize, smfm: bool) -> Result<Self> {
        b.scope("btmfm", |b| {
            Ok(Btmfm {
                smfm: if smfm { Some(Smfm::new(b, "smfm", c)?) } else { None },
                mha: MhaResidual::new(b, c, cfg.fusion_heads)?,
                ssm: SsmBlock::new(b, c, c * cfg.ssm_expand, cfg.ssm_state, cfg.ssm_conv)?,
                ffn: FfnResidual::new(b, c)?,
            })
        })
    }

    /// Fuses `[N, C, h, w]` bottleneck maps; tokens are taken in raster order.
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, fr: Var<'g, T>, fd: Var<'g, T>) -> Result<Var<'g, T>> {
        let f = fuse(self.smfm.as_ref(), p, fr, fd)?;
        let s = f.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = to_tokens(f)?.reshape(&[n, h * w, c])?;
        let t = self.mha.forward(p, t)?;
        let t = t.add(self.ssm.forward(p, t)?)?;
        let t = self.ffn.forward(p, t)?;
        to_maps(t.reshape(&[n, h, w, c])?)
    }
}
