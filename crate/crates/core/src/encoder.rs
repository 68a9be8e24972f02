//! Dual-branch encoder: shifted-window attention on RGB-D, residual
//! convolutions on depth. Both branches emit `[N, C * 2^i, H / 2^(i+2), W / 2^(i+2)]`.

use hdc_tensor::{Bound, Conv2dOpts, Float, Tensor, Var};

use crate::attention::Attention;
use crate::config::{ModelConfig, STAGES, STRIDE};
use crate::error::{invalid, Result};
use crate::layers::{to_maps, to_tokens, Builder, Conv, GroupNorm, LayerNorm, Linear};

/// Large negative score that removes a key from a softmax row.
const MASKED: f64 = -1e9;

#[derive(Clone, Debug)]
pub struct FeaturePyramid<'g, T: Float> {
    pub rgb: Vec<Var<'g, T>>,
    pub depth: Vec<Var<'g, T>>,
}

/// Largest window no bigger than `window` that tiles both `h` and `w`.
pub fn effective_window(h: usize, w: usize, window: usize) -> usize {
    (1..=window.min(h).min(w)).rev().find(|d| h.is_multiple_of(*d) && w.is_multiple_of(*d)).unwrap_or(1)
}

/// Non-overlapping 4x4 patch projection, `[N, Cin, H, W] -> [N, C, H/4, W/4]`.
pub fn patch_embed<'g, T: Float>(conv: &Conv, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = x.shape();
    if s.len() != 4 || !s[2].is_multiple_of(4) || !s[3].is_multiple_of(4) {
        return Err(invalid("patch_embed", format!("input {s:?} needs H and W divisible by 4")));
    }
    conv.forward(p, x)
}

/// `[N, H, W, C] -> [N * nW, ws * ws, C]`.
fn window_partition<'g, T: Float>(x: Var<'g, T>, ws: usize) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    Ok(x
        .reshape(&[n, h / ws, ws, w / ws, ws, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n * (h / ws) * (w / ws), ws * ws, c])?)
}

fn window_reverse<'g, T: Float>(x: Var<'g, T>, n: usize, h: usize, w: usize, ws: usize) -> Result<Var<'g, T>> {
    let c = x.shape()[2];
    Ok(x
        .reshape(&[n, h / ws, w / ws, ws, ws, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[n, h, w, c])?)
}

/// Additive mask `[nW, 1, T, T]` separating tokens that the cyclic shift
/// brought together from different image regions.
pub fn shift_mask<T: Float>(h: usize, w: usize, ws: usize, shift: usize) -> Tensor<T> {
    let region = |i: usize, len: usize| {
        if i < len - ws {
            0
        } else if i < len - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / ws, w / ws);
    let t = ws * ws;
    let mut m = vec![T::zero(); nh * nw * t * t];
    for wy in 0..nh {
        for wx in 0..nw {
            let label = |k: usize| {
                let (y, x) = (wy * ws + k / ws, wx * ws + k % ws);
                region(y, h) * 3 + region(x, w)
            };
            let base = (wy * nw + wx) * t * t;
            for q in 0..t {
                for k in 0..t {
                    if label(q) != label(k) {
                        m[base + q * t + k] = T::of(MASKED);
                    }
                }
            }
        }
    }
    Tensor::new(vec![nh * nw, 1, t, t], m).expect("mask shape")
}

#[derive(Clone, Debug)]
pub struct SwinBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SwinBlock {
    pub fn new(b: &mut Builder, name: impl std::fmt::Display, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(SwinBlock {
                ln1: LayerNorm::new(b, "ln1", dim)?,
                attn: Attention::new(b, "attn", dim, heads)?,
                ln2: LayerNorm::new(b, "ln2", dim)?,
                fc1: Linear::new(b, "fc1", dim, dim * mlp_ratio, true)?,
                fc2: Linear::new(b, "fc2", dim * mlp_ratio, dim, true)?,
            })
        })
    }

    /// Token-layout forward, `x: [N, H, W, C]`. Returns the output and the
    /// attention weights.
    pub fn forward_tokens<'g, T: Float>(
        &self,
        p: &Bound<'g, T>,
        x: Var<'g, T>,
        ws: usize,
        shifted: bool,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = x.shape();
        let (n, h, w) = (s[0], s[1], s[2]);
        if ws == 0 || h % ws != 0 || w % ws != 0 {
            return Err(invalid(
                "window_attention_block",
                format!("window {ws} does not tile the {h}x{w} feature map"),
            ));
        }
        let shift = if shifted && (ws < h || ws < w) { ws / 2 } else { 0 };
        let mut y = self.ln1.forward(p, x)?;
        if shift > 0 {
            y = y.roll(1, shift)?.roll(2, shift)?;
        }
        let mask = (shift > 0).then(|| p.graph().constant(shift_mask(h, w, ws, shift)));
        let (a, weights) = self.attn.forward_with_weights(p, window_partition(y, ws)?, mask)?;
        let mut a = window_reverse(a, n, h, w, ws)?;
        if shift > 0 {
            a = a.roll(1, h - shift)?.roll(2, w - shift)?;
        }
        let x = x.add(a)?;
        let m = self.fc2.forward(p, self.fc1.forward(p, self.ln2.forward(p, x)?)?.gelu())?;
        Ok((x.add(m)?, weights))
    }
}

/// One shifted-window transformer block on `[N, C, h, w]` feature maps.
pub fn window_attention_block<'g, T: Float>(
    block: &SwinBlock,
    p: &Bound<'g, T>,
    x: Var<'g, T>,
    window: usize,
    shifted: bool,
) -> Result<Var<'g, T>> {
    let (y, _) = block.forward_tokens(p, to_tokens(x)?, window, shifted)?;
    to_maps(y)
}

/// 2x2 space-to-depth followed by `LN` and a `4C -> 2C` projection.
#[derive(Clone, Debug)]
pub struct PatchMerging {
    pub ln: LayerNorm,
    pub reduce: Linear,
}

impl PatchMerging {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        b.scope("merge", |b| {
            Ok(PatchMerging {
                ln: LayerNorm::new(b, "ln", 4 * dim)?,
                reduce: Linear::new(b, "reduce", 4 * dim, 2 * dim, false)?,
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let y = x
            .reshape(&[n, h / 2, 2, w / 2, 2, c])?
            .permute(&[0, 1, 3, 4, 2, 5])?
            .reshape(&[n, h / 2, w / 2, 4 * c])?;
        self.reduce.forward(p, self.ln.forward(p, y)?)
    }
}

#[derive(Clone, Debug)]
pub struct SwinStage {
    pub merge: Option<PatchMerging>,
    pub blocks: Vec<SwinBlock>,
}

#[derive(Clone, Debug)]
pub struct RgbdBranch {
    pub embed: Conv,
    pub embed_ln: LayerNorm,
    pub stages: Vec<SwinStage>,
    pub window: usize,
}

impl RgbdBranch {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let cin = if cfg.rgbd_input { 4 } else { 3 };
        let c = cfg.channels;
        b.scope("rgbd", |b| {
            let embed = Conv::new(b, "embed", cin, c, 4, Conv2dOpts::new(4, 0), true)?;
            let embed_ln = LayerNorm::new(b, "embed_ln", c)?;
            let mut stages = Vec::new();
            for s in 0..STAGES {
                stages.push(b.scope(format!("s{}", s + 1), |b| {
                    let dim = cfg.stage_channels(s);
                    let merge = if s > 0 { Some(PatchMerging::new(b, dim / 2)?) } else { None };
                    let blocks = (0..cfg.blocks)
                        .map(|j| SwinBlock::new(b, j, dim, cfg.stage_heads(s), cfg.mlp_ratio))
                        .collect::<Result<_>>()?;
                    Ok(SwinStage { merge, blocks })
                })?);
            }
            Ok(RgbdBranch {
                embed,
                embed_ln,
                stages,
                window: cfg.window,
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let mut t = self.embed_ln.forward(p, to_tokens(patch_embed(&self.embed, p, x)?)?)?;
        let mut out = Vec::with_capacity(STAGES);
        for stage in &self.stages {
            if let Some(m) = &stage.merge {
                t = m.forward(p, t)?;
            }
            let s = t.shape();
            let ws = effective_window(s[1], s[2], self.window);
            for (j, blk) in stage.blocks.iter().enumerate() {
                t = blk.forward_tokens(p, t, ws, j % 2 == 1)?.0;
            }
            out.push(to_maps(t)?);
        }
        Ok(out)
    }
}

/// `x + GN(conv(relu(GN(conv(x)))))` with 3x3 convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub conv1: Conv,
    pub norm1: GroupNorm,
    pub conv2: Conv,
    pub norm2: GroupNorm,
}

impl ResBlock {
    pub fn new(b: &mut Builder, name: impl std::fmt::Display, c: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(ResBlock {
                conv1: Conv::new(b, "conv1", c, c, 3, Conv2dOpts::new(1, 1), false)?,
                norm1: GroupNorm::new(b, "norm1", c)?,
                conv2: Conv::new(b, "conv2", c, c, 3, Conv2dOpts::new(1, 1), false)?,
                norm2: GroupNorm::new(b, "norm2", c)?,
            })
        })
    }
}

pub fn resnet_block<'g, T: Float>(blk: &ResBlock, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
    let r = blk.norm1.forward(p, blk.conv1.forward(p, x)?)?.relu();
    let r = blk.norm2.forward(p, blk.conv2.forward(p, r)?)?;
    Ok(x.add(r)?)
}

#[derive(Clone, Debug)]
pub struct DepthBranch {
    pub stem: Conv,
    pub stem_norm: GroupNorm,
    pub downs: Vec<Conv>,
    pub blocks: Vec<Vec<ResBlock>>,
}

impl DepthBranch {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.channels;
        b.scope("depth", |b| {
            let stem = Conv::new(b, "stem", 1, c, 3, Conv2dOpts::new(1, 1), true)?;
            let stem_norm = GroupNorm::new(b, "stem_norm", c)?;
            let (mut downs, mut blocks) = (Vec::new(), Vec::new());
            for s in 0..STAGES {
                b.scope(format!("s{}", s + 1), |b| {
                    let dim = cfg.stage_channels(s);
                    downs.push(if s == 0 {
                        Conv::new(b, "down", c, c, 4, Conv2dOpts::new(4, 0), true)?
                    } else {
                        Conv::new(b, "down", dim / 2, dim, 2, Conv2dOpts::new(2, 0), true)?
                    });
                    blocks.push((0..cfg.blocks).map(|j| ResBlock::new(b, j, dim)).collect::<Result<_>>()?);
                    Ok(())
                })?;
            }
            Ok(DepthBranch {
                stem,
                stem_norm,
                downs,
                blocks,
            })
        })
    }

    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, x: Var<'g, T>) -> Result<Vec<Var<'g, T>>> {
        let mut y = self.stem_norm.forward(p, self.stem.forward(p, x)?)?.relu();
        let mut out = Vec::with_capacity(STAGES);
        for (down, blocks) in self.downs.iter().zip(&self.blocks) {
            y = down.forward(p, y)?;
            for blk in blocks {
                y = resnet_block(blk, p, y)?;
            }
            out.push(y);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub rgbd: RgbdBranch,
    pub depth: DepthBranch,
    pub rgbd_input: bool,
}

impl Encoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        Ok(Encoder {
            rgbd: RgbdBranch::new(b, cfg)?,
            depth: DepthBranch::new(b, cfg)?,
            rgbd_input: cfg.rgbd_input,
        })
    }

    /// `rgb: [N, 3, H, W]`, `depth: [N, 1, H, W]` with `H, W` multiples of 32.
    pub fn encode<'g, T: Float>(&self, p: &Bound<'g, T>, rgb: Var<'g, T>, depth: Var<'g, T>) -> Result<FeaturePyramid<'g, T>> {
        let (rs, ds) = (rgb.shape(), depth.shape());
        if rs.len() != 4 || ds.len() != 4 || rs[1] != 3 || ds[1] != 1 || rs[0] != ds[0] || rs[2..] != ds[2..] {
            return Err(invalid(
                "encode",
                format!("rgb {rs:?} and depth {ds:?} must be [N,3,H,W] and [N,1,H,W] of equal size"),
            ));
        }
        if rs[2] % STRIDE != 0 || rs[3] % STRIDE != 0 {
            return Err(invalid("encode", format!("H and W must be multiples of {STRIDE}, got {rs:?}")));
        }
        let x = if self.rgbd_input { Var::concat(&[rgb, depth], 1)? } else { rgb };
        Ok(FeaturePyramid {
            rgb: self.rgbd.forward(p, x)?,
            depth: self.depth.forward(p, depth)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use hdc_tensor::{Graph, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_shrinks_to_a_common_divisor() {
        assert_eq!(effective_window(16, 16, 4), 4);
        assert_eq!(effective_window(8, 6, 4), 2);
        assert_eq!(effective_window(2, 2, 4), 2);
        assert_eq!(effective_window(5, 7, 4), 1);
    }

    #[test]
    fn shift_mask_keeps_diagonal_open() {
        let m = shift_mask::<f64>(4, 4, 2, 1);
        assert_eq!(m.shape(), [4, 1, 4, 4]);
        for w in 0..4 {
            for q in 0..4 {
                assert_eq!(m.get(&[w, 0, q, q]), 0.0);
            }
        }
        // The top-left window holds one region only.
        assert!(m.data()[..16].iter().all(|&v| v == 0.0));
        // The bottom-right window holds four regions, one pixel each.
        let last = &m.data()[48..];
        assert_eq!(last.iter().filter(|&&v| v == 0.0).count(), 4);
    }

    fn block(dim: usize, heads: usize) -> (SwinBlock, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let blk = SwinBlock::new(&mut Builder::new(&mut store, 2), "b", dim, heads, 2).unwrap();
        (blk, store.cast())
    }

    #[test]
    fn window_weights_are_distributions() {
        let (blk, store) = block(8, 2);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let x = Tensor::<f64>::randn([2, 4, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        for shifted in [false, true] {
            let (y, w) = blk.forward_tokens(&p, g.constant(x.clone()), 4, shifted).unwrap();
            assert_eq!(y.shape(), [2, 4, 8, 8]);
            let w = w.value();
            let keys = *w.shape().last().unwrap();
            for row in w.data().chunks(keys) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_window_is_plain_attention_on_one_token() {
        let (blk, store) = block(8, 1);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let x = g.constant(Tensor::<f64>::randn([1, 1, 1, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let (y, w) = blk.forward_tokens(&p, x, 1, true).unwrap();
        assert_eq!(w.value().data(), [1.0]);
        let flat = x.reshape(&[1, 1, 8]).unwrap();
        let a = blk.attn.forward(&p, blk.ln1.forward(&p, flat).unwrap(), None).unwrap();
        let r = flat.add(a).unwrap();
        let m = blk.fc2.forward(&p, blk.fc1.forward(&p, blk.ln2.forward(&p, r).unwrap()).unwrap().gelu()).unwrap();
        let want = r.add(m).unwrap().value();
        assert!(y.value().data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn untileable_window_is_rejected() {
        let (blk, store) = block(8, 2);
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let x = g.constant(Tensor::<f64>::zeros([1, 6, 4, 8]));
        assert!(blk.forward_tokens(&p, x, 4, false).is_err());
        assert!(blk.forward_tokens(&p, x, 0, false).is_err());
    }

    #[test]
    fn pyramid_shapes() {
        let cfg = ModelConfig::desk();
        let mut store = ParamStore::new();
        let enc = Encoder::new(&mut Builder::new(&mut store, 0), &cfg).unwrap();
        let g = Graph::new();
        let p = store.bind_frozen(&g);
        let rgb = g.constant(Tensor::<f32>::zeros([2, 3, 64, 96]));
        let depth = g.constant(Tensor::<f32>::ones([2, 1, 64, 96]));
        let f = enc.encode(&p, rgb, depth).unwrap();
        for s in 0..4 {
            let want = [2, cfg.stage_channels(s), 16 >> s, 24 >> s];
            assert_eq!(f.rgb[s].shape(), want);
            assert_eq!(f.depth[s].shape(), want);
        }
        let short = g.constant(Tensor::<f32>::zeros([2, 3, 48, 96]));
        let short_d = g.constant(Tensor::<f32>::zeros([2, 1, 48, 96]));
        assert!(enc.encode(&p, short, short_d).is_err());
    }
}
