//! Multi-scale decoder built around attention-weighted down-fusion of
//! adjacent encoder stages.

use hdc_tensor::{Bound, Conv2dOpts, Float, UpsampleMode, Var};

use crate::config::{ModelConfig, STAGES};
use crate::error::{invalid, Result};
use crate::layers::{Builder, Conv};

/// Pools a `[N, C/2, 2h, 2w]` map to `h x w` and duplicates every channel,
/// channel `k` landing on `2k` and `2k + 1`.
pub fn align_shallow<'g, T: Float>(shallow: Var<'g, T>, target: [usize; 3]) -> Result<Var<'g, T>> {
    let s = shallow.shape();
    let [c, h, w] = target;
    if s.len() != 4 || 2 * s[1] != c || s[2] != 2 * h || s[3] != 2 * w {
        return Err(invalid(
            "align_shallow",
            format!("shallow feature {s:?} must be [N, {}, {}, {}]", c / 2, 2 * h, 2 * w),
        ));
    }
    let n = s[0];
    let pooled = shallow.adaptive_avg_pool(h, w)?.reshape(&[n, c / 2, 1, h, w])?;
    Ok(Var::concat(&[pooled, pooled], 2)?.reshape(&[n, c, h, w])?)
}

/// `conv7x7([channel_max(F), channel_mean(F)])`, pre-sigmoid, `[N, 1, h, w]`.
pub fn spatial_attention<'g, T: Float>(conv: &Conv, p: &Bound<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    let pooled = Var::concat(&[f.channel_max()?, f.channel_mean()?], 1)?;
    conv.forward(p, pooled)
}

/// `conv1x1(conv1x1(GAP(F)))`, pre-sigmoid, `[N, C, 1, 1]`. No activation
/// between the two convolutions.
pub fn channel_attention<'g, T: Float>(ca: &[Conv; 2], p: &Bound<'g, T>, f: Var<'g, T>) -> Result<Var<'g, T>> {
    let z = ca[0].forward(p, f.global_avg_pool()?)?;
    ca[1].forward(p, z)
}

pub const REDUCTION: usize = 4;

#[derive(Clone, Debug)]
pub struct DownFusionParams {
    pub spatial: Conv,
    pub channel: [Conv; 2],
    /// Depthwise 3x3 on the `2C` concat, then pointwise `2C -> C`.
    pub dw: Conv,
    pub pw: Conv,
    pub out_deep: Conv,
    pub out_shallow: Conv,
}

impl DownFusionParams {
    pub fn new(b: &mut Builder, name: impl std::fmt::Display, c: usize) -> Result<Self> {
        if !c.is_multiple_of(REDUCTION) {
            return Err(invalid("channel_attention", format!("channels {c} not divisible by {REDUCTION}")));
        }
        let one = Conv2dOpts::default();
        b.scope(name, |b| {
            Ok(DownFusionParams {
                spatial: Conv::new(b, "sa", 2, 1, 7, Conv2dOpts::new(1, 3), true)?,
                channel: [
                    Conv::new(b, "ca1", c, c / REDUCTION, 1, one, true)?,
                    Conv::new(b, "ca2", c / REDUCTION, c, 1, one, true)?,
                ],
                dw: Conv::new(b, "dw", 2 * c, 2 * c, 3, Conv2dOpts::new(1, 1).groups(2 * c), true)?,
                pw: Conv::new(b, "pw", 2 * c, c, 1, one, true)?,
                out_deep: Conv::new(b, "out_deep", c, c, 1, one, true)?,
                out_shallow: Conv::new(b, "out_shallow", c, c, 1, one, true)?,
            })
        })
    }
}

/// Intermediate values of one down-fusion, exposed for inspection.
pub struct DownFusionTrace<'g, T: Float> {
    pub aligned: Var<'g, T>,
    pub sum: Var<'g, T>,
    pub weight: Var<'g, T>,
    pub blended: Var<'g, T>,
    pub out: Var<'g, T>,
}

pub fn down_fusion_trace<'g, T: Float>(
    df: &DownFusionParams,
    p: &Bound<'g, T>,
    fi: Var<'g, T>,
    shallow: Var<'g, T>,
) -> Result<DownFusionTrace<'g, T>> {
    let s = fi.shape();
    if s.len() != 4 {
        return Err(invalid("down_fusion", format!("deep feature {s:?} must be [N, C, h, w]")));
    }
    let aligned = align_shallow(shallow, [s[1], s[2], s[3]])?;
    let sum = fi.add(aligned)?;
    let att = channel_attention(&df.channel, p, sum)?.add(spatial_attention(&df.spatial, p, sum)?)?;
    let cat = Var::concat(&[att, sum], 1)?;
    let weight = df.pw.forward(p, df.dw.forward(p, cat)?)?.sigmoid();
    let blended = df
        .out_deep
        .forward(p, weight.mul(fi)?)?
        .add(df.out_shallow.forward(p, weight.rsub_scalar(1.0).mul(aligned)?)?)?;
    let out = blended.add(sum)?;
    Ok(DownFusionTrace {
        aligned,
        sum,
        weight,
        blended,
        out,
    })
}

pub fn down_fusion<'g, T: Float>(df: &DownFusionParams, p: &Bound<'g, T>, fi: Var<'g, T>, shallow: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(down_fusion_trace(df, p, fi, shallow)?.out)
}

/// Initial head bias: `softplus(b) = 1 m`.
pub const HEAD_BIAS: f32 = 0.541_324_85;

#[derive(Clone, Debug)]
pub struct Decoder {
    /// Down-fusions at stages 4, 3, 2 (deep to shallow).
    pub fusions: Vec<DownFusionParams>,
    /// `2C_i -> C_i` convolutions after each 2x upsampling, stages 3, 2, 1.
    pub ups: Vec<Conv>,
    pub head: [Conv; 3],
    pub upsample: UpsampleMode,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &ModelConfig) -> Result<Self> {
        let c3 = Conv2dOpts::new(1, 1);
        b.scope("dec", |b| {
            let mut fusions = Vec::new();
            let mut ups = Vec::new();
            for s in (1..STAGES).rev() {
                let c = cfg.stage_channels(s);
                fusions.push(DownFusionParams::new(b, format!("df{}", s + 1), c)?);
                ups.push(Conv::new(b, &format!("up{s}"), c, c / 2, 3, c3, true)?);
            }
            let c = cfg.channels;
            let head = [
                Conv::new(b, "head1", c, c, 3, c3, true)?,
                Conv::new(b, "head2", c, c, 3, c3, true)?,
                Conv::new(b, "head3", c, 1, 3, c3, true)?,
            ];
            // Start from a near-constant 1 m prediction.
            b.scale(head[2].w, 0.01);
            b.fill(head[2].b.expect("head bias"), HEAD_BIAS);
            Ok(Decoder {
                fusions,
                ups,
                head,
                upsample: UpsampleMode::Bilinear,
            })
        })
    }

    /// `skips`: fused stage 1..3 maps; `bottleneck`: fused stage 4 map.
    /// Returns strictly positive depth at 4x the stage-1 resolution.
    pub fn decode<'g, T: Float>(&self, p: &Bound<'g, T>, skips: &[Var<'g, T>], bottleneck: Var<'g, T>) -> Result<Var<'g, T>> {
        if skips.len() != STAGES - 1 {
            return Err(invalid("decode", format!("expected {} skip features, got {}", STAGES - 1, skips.len())));
        }
        let mut x = bottleneck;
        for k in 0..STAGES - 1 {
            let skip = skips[STAGES - 2 - k];
            x = down_fusion(&self.fusions[k], p, x, skip)?;
            x = self.ups[k].forward(p, x.upsample2x(self.upsample)?)?;
            if x.shape() != skip.shape() {
                return Err(invalid(
                    "decode",
                    format!("upsampled {:?} does not match skip {:?}", x.shape(), skip.shape()),
                ));
            }
            x = x.add(skip)?;
        }
        let x = self.head[0].forward(p, x.upsample2x(self.upsample)?)?.relu();
        let x = self.head[1].forward(p, x.upsample2x(self.upsample)?)?.relu();
        Ok(self.head[2].forward(p, x)?.softplus())
    }
}
