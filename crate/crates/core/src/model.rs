//! The full network: encoder, per-stage fusion, decoder.

use hdc_tensor::{Bound, Float, PadMode, ParamStore, Var};

use crate::config::{ModelConfig, STAGES, STRIDE};
use crate::decoder::Decoder;
use crate::encoder::Encoder;
use crate::error::{invalid, Result};
use crate::fusion::{fuse, Btmfm, Smfm};
use crate::layers::Builder;

#[derive(Clone, Debug)]
pub struct HdcNet {
    pub config: ModelConfig,
    pub encoder: Encoder,
    /// Shallow fusion at stages 1..3, absent when disabled.
    pub smfm: Vec<Smfm>,
    /// Bottleneck fusion, absent when disabled.
    pub btmfm: Option<Btmfm>,
    /// Bottleneck SMFM used when `btmfm` is disabled but SMFM is enabled.
    pub bottleneck_smfm: Option<Smfm>,
    pub decoder: Decoder,
}

/// Rounds up to the next multiple of the encoder stride.
pub fn padded(len: usize) -> usize {
    len.div_ceil(STRIDE) * STRIDE
}

impl HdcNet {
    /// Builds the network and its freshly initialized parameters.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let net = {
            let b = &mut Builder::new(&mut store, seed);
            let encoder = Encoder::new(b, config)?;
            let smfm = if config.use_smfm {
                (0..STAGES - 1)
                    .map(|s| Smfm::new(b, format!("smfm{}", s + 1), config.stage_channels(s)))
                    .collect::<Result<_>>()?
            } else {
                Vec::new()
            };
            let c4 = config.stage_channels(STAGES - 1);
            let btmfm = if config.use_btmfm {
                Some(Btmfm::new(b, config, c4, config.use_smfm)?)
            } else {
                None
            };
            let bottleneck_smfm = if !config.use_btmfm && config.use_smfm {
                Some(Smfm::new(b, "smfm4", c4)?)
            } else {
                None
            };
            let decoder = Decoder::new(b, config)?;
            HdcNet {
                config: config.clone(),
                encoder,
                smfm,
                btmfm,
                bottleneck_smfm,
                decoder,
            }
        };
        Ok((net, store))
    }

    /// `rgb: [N, 3, H, W]` in `[0, 1]`, `depth: [N, 1, H, W]` in meters.
    /// Inputs are replicate-padded on the bottom and right to multiples of
    /// the encoder stride; the prediction is cropped back to `[N, 1, H, W]`.
    pub fn forward<'g, T: Float>(&self, p: &Bound<'g, T>, rgb: Var<'g, T>, depth: Var<'g, T>) -> Result<Var<'g, T>> {
        let (rs, ds) = (rgb.shape(), depth.shape());
        if rs.len() != 4 || ds.len() != 4 || rs[0] != ds[0] || rs[2..] != ds[2..] || rs[1] != 3 || ds[1] != 1 {
            return Err(invalid(
                "forward",
                format!("rgb {rs:?} and depth {ds:?} must be [N,3,H,W] and [N,1,H,W] of equal size"),
            ));
        }
        let (h, w) = (rs[2], rs[3]);
        let (ph, pw) = (padded(h) - h, padded(w) - w);
        let pad = |x: Var<'g, T>| -> Result<Var<'g, T>> {
            if ph == 0 && pw == 0 {
                Ok(x)
            } else {
                Ok(x.pad2d([0, ph, 0, pw], PadMode::Replicate)?)
            }
        };
        let pyr = self.encoder.encode(p, pad(rgb)?, pad(depth)?)?;
        let mut skips = Vec::with_capacity(STAGES - 1);
        for s in 0..STAGES - 1 {
            skips.push(fuse(self.smfm.get(s), p, pyr.rgb[s], pyr.depth[s])?);
        }
        let (fr, fd) = (pyr.rgb[STAGES - 1], pyr.depth[STAGES - 1]);
        let bottleneck = match &self.btmfm {
            Some(bt) => bt.forward(p, fr, fd)?,
            None => fuse(self.bottleneck_smfm.as_ref(), p, fr, fd)?,
        };
        let mut out = self.decoder.decode(p, &skips, bottleneck)?;
        if ph > 0 {
            out = out.slice(2, 0, h)?;
        }
        if pw > 0 {
            out = out.slice(3, 0, w)?;
        }
        Ok(out)
    }
}
