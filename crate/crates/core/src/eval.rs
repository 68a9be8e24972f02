//! Inference, evaluation, ablation and single-image prediction.

use std::path::Path;

use hdc_tensor::{parallel, Graph, ParamStore, Tensor};

use crate::data::{Batch, DepthSample, Gray16, Rgb8};
use crate::error::{Error, Result};
use crate::metrics::{MetricsAccum, MetricsReport, CSV_HEADER};
use crate::model::HdcNet;
use crate::train::{train, TrainConfig};

/// Samples per forward pass during inference.
pub const EVAL_BATCH: usize = 4;

/// Predicted depth maps, one `H*W` vector per sample, in input order.
pub fn predict(net: &HdcNet, params: &ParamStore<f32>, samples: &[DepthSample]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&DepthSample> = chunk.iter().collect();
        let b = Batch::new(&refs)?;
        let g = Graph::new();
        let p = params.bind_frozen(&g);
        let pred = net.forward(&p, g.constant(b.rgb), g.constant(b.raw))?;
        let v = pred.value();
        let hw = chunk[0].pixels();
        out.extend(v.data().chunks(hw).map(<[f32]>::to_vec));
    }
    Ok(out)
}

pub struct EvalResult {
    /// Pixels pooled over every sample.
    pub overall: MetricsReport,
    pub per_sample: Vec<(String, MetricsReport)>,
    pub preds: Vec<Vec<f32>>,
}

/// Scores predictions on each sample's evaluation mask. Samples whose mask
/// is empty contribute nothing and are omitted from `per_sample`.
pub fn evaluate(net: &HdcNet, params: &ParamStore<f32>, samples: &[DepthSample], per_sample: bool) -> Result<EvalResult> {
    let preds = predict(net, params, samples)?;
    let mut all = MetricsAccum::new();
    let mut rows = Vec::new();
    for (s, pred) in samples.iter().zip(&preds) {
        let mask = s.eval_mask();
        all.add(pred, &s.gt, &mask)?;
        if per_sample {
            let mut one = MetricsAccum::new();
            one.add(pred, &s.gt, &mask)?;
            if one.count() > 0 {
                rows.push((s.id.clone(), one.report()?));
            }
        }
    }
    Ok(EvalResult { overall: all.report()?, per_sample: rows, preds })
}

impl EvalResult {
    /// A header and one pooled row; with per-sample rows an `id` column is
    /// added and the pooled row is labelled `all`.
    pub fn csv(&self, per_sample: bool) -> String {
        if !per_sample {
            return format!("{CSV_HEADER}\n{}\n", self.overall.csv_row());
        }
        let mut s = format!("id,{CSV_HEADER}\n");
        for (id, r) in &self.per_sample {
            s.push_str(&format!("{id},{}\n", r.csv_row()));
        }
        s.push_str(&format!("all,{}\n", self.overall.csv_row()));
        s
    }
}

/// Rejects samples whose size differs from what the model was trained on.
pub fn check_sizes(cfg: &TrainConfig, samples: &[DepthSample]) -> Result<()> {
    match samples.iter().find(|s| (s.width, s.height) != (cfg.width, cfg.height)) {
        Some(s) => Err(Error::Sample {
            id: s.id.clone(),
            msg: format!(
                "size {}x{} does not match the checkpoint's {}x{}",
                s.width, s.height, cfg.width, cfg.height
            ),
        }),
        None => Ok(()),
    }
}

pub const ABLATION_HEADER: &str = "smfm,btmfm,rmse,rel,mae,d105,d110,d125";

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub smfm: bool,
    pub btmfm: bool,
    pub report: MetricsReport,
}

impl AblationRow {
    pub fn csv_row(&self) -> String {
        format!("{},{},{}", self.smfm as u8, self.btmfm as u8, self.report.csv_row())
    }
}

/// The four fusion variants in table order: none, SMFM, BTMFM, both.
pub fn ablation_configs(base: &TrainConfig) -> [TrainConfig; 4] {
    [(false, false), (true, false), (false, true), (true, true)].map(|(s, b)| {
        let mut c = base.clone();
        c.model.use_smfm = s;
        c.model.use_btmfm = b;
        c
    })
}

/// Trains and evaluates every variant with identical data and seed. The
/// variants run concurrently unless sequential mode is forced.
pub fn ablate(base: &TrainConfig, train_set: &[DepthSample], test_set: &[DepthSample]) -> Result<Vec<AblationRow>> {
    let cfgs = ablation_configs(base);
    parallel::map(cfgs.len(), |i| {
        let c = &cfgs[i];
        let out = train(c, train_set, &[], None, |_| {})?;
        let r = evaluate(&out.net, &out.params, test_set, false)?;
        Ok(AblationRow {
            smfm: c.model.use_smfm,
            btmfm: c.model.use_btmfm,
            report: r.overall,
        })
    })
    .into_iter()
    .collect()
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Completes one RGB + raw-depth pair. Raw values are converted to meters
/// with `depth_scale`; the result is in meters.
pub fn infer(net: &HdcNet, params: &ParamStore<f32>, cfg: &TrainConfig, rgb: &Rgb8, raw: &Gray16, depth_scale: f64) -> Result<Vec<f32>> {
    if (rgb.width, rgb.height) != (raw.width, raw.height) {
        return Err(crate::error::invalid(
            "infer",
            format!("rgb is {}x{} but depth is {}x{}", rgb.width, rgb.height, raw.width, raw.height),
        ));
    }
    let (w, h) = (rgb.width, rgb.height);
    if (w, h) != (cfg.width, cfg.height) {
        return Err(crate::error::invalid(
            "infer",
            format!("input is {w}x{h} but the checkpoint expects {}x{}", cfg.width, cfg.height),
        ));
    }
    let mut planar = vec![0.0f32; 3 * w * h];
    for (i, px) in rgb.data.chunks(3).enumerate() {
        for c in 0..3 {
            planar[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    let depth: Vec<f32> = raw.data.iter().map(|&v| (v as f64 * depth_scale) as f32).collect();
    let g = Graph::new();
    let p = params.bind_frozen(&g);
    let pred = net.forward(
        &p,
        g.constant(Tensor::new(vec![1, 3, h, w], planar)?),
        g.constant(Tensor::new(vec![1, 1, h, w], depth)?),
    )?;
    Ok(pred.value().data().to_vec())
}

/// Quantizes meters to 16-bit units of `depth_scale`. Every pixel is
/// stored as at least 1 so that a prediction never reads back as missing.
pub fn quantize_depth(depth: &[f32], width: usize, height: usize, depth_scale: f64) -> Gray16 {
    let data = depth
        .iter()
        .map(|&d| (d as f64 / depth_scale).round().clamp(1.0, u16::MAX as f64) as u16)
        .collect();
    Gray16 { width, height, data }
}

pub fn write_prediction(path: &Path, depth: &[f32], width: usize, height: usize, depth_scale: f64) -> Result<()> {
    crate::data::write_pgm16(path, &quantize_depth(depth, width, height, depth_scale))
}
