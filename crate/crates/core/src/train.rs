//! Training configuration and the optimization loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hdc_tensor::{Graph, ParamStore, TensorError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, restore, save_checkpoint};
use crate::config::{KvConfig, ModelConfig};
use crate::data::{Batch, DepthSample};
use crate::error::{io_err, Error, Result};
use crate::eval::evaluate;
use crate::loss::total_loss;
use crate::model::HdcNet;
use crate::optim::AdamW;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub width: usize,
    pub height: usize,
    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch: usize,
    pub lr: f64,
    pub lambda: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Meters per stored unit for depth files written by this model.
    pub depth_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            model: ModelConfig::desk(),
            width: 64,
            height: 48,
            epochs: 40,
            steps: None,
            batch: 8,
            lr: 1e-3,
            lambda: 0.1,
            weight_decay: 0.01,
            seed: 0,
            depth_scale: 1e-4,
        }
    }

    pub fn paper() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            width: 320,
            height: 240,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!("unknown preset `{other}` (desk, paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let m = crate::data::synth::SIZE_MULTIPLE;
        if self.width == 0 || self.height == 0 || !self.width.is_multiple_of(m) || !self.height.is_multiple_of(m) {
            return Err(Error::Config(format!("size {}x{} must be a positive multiple of {m}", self.width, self.height)));
        }
        if !(self.lr > 0.0) || self.batch == 0 {
            return Err(Error::Config("lr must be positive and batch at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !(self.weight_decay >= 0.0) || !(self.depth_scale > 0.0) {
            return Err(Error::Config("lambda and weight_decay must be non-negative, depth_scale positive".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("width", self.width);
        kv.set("height", self.height);
        self.model.write_kv(&mut kv);
        kv.set("epochs", self.epochs);
        if let Some(s) = self.steps {
            kv.set("steps", s);
        }
        kv.set("batch", self.batch);
        kv.set("lr", self.lr);
        kv.set("lambda", self.lambda);
        kv.set("weight_decay", self.weight_decay);
        kv.set("seed", self.seed);
        kv.set("depth_scale", self.depth_scale);
        kv
    }

    /// Starts from `preset` (default desk) and applies every known key.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mut c = Self::preset(kv.get("preset").unwrap_or("desk"))?;
        if let Some(size) = kv.get("size") {
            (c.width, c.height) = parse_size(size)?;
        }
        kv.read_into("width", &mut c.width)?;
        kv.read_into("height", &mut c.height)?;
        c.model.read_kv(kv)?;
        kv.read_into("epochs", &mut c.epochs)?;
        if let Some(s) = kv.value("steps")? {
            c.steps = Some(s);
        }
        kv.read_into("batch", &mut c.batch)?;
        kv.read_into("lr", &mut c.lr)?;
        kv.read_into("lambda", &mut c.lambda)?;
        kv.read_into("weight_decay", &mut c.weight_decay)?;
        kv.read_into("seed", &mut c.seed)?;
        kv.read_into("depth_scale", &mut c.depth_scale)?;
        c.validate()?;
        Ok(c)
    }
}

/// Parses `WxH`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("size `{s}` is not WxH"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((w.trim().parse().map_err(|_| bad())?, h.trim().parse().map_err(|_| bad())?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_mse: f64,
    pub l_normal: f64,
    pub total: f64,
    pub wall_s: f64,
}

pub const LOG_HEADER: &str = "epoch,l_mse,l_normal,total,wall_s";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!("{},{:.8},{:.8},{:.8},{:.3}", self.epoch, self.l_mse, self.l_normal, self.total, self.wall_s)
    }
}

pub struct TrainOutcome {
    pub net: HdcNet,
    pub params: ParamStore<f32>,
    pub logs: Vec<EpochLog>,
    pub steps: usize,
    /// `(l_mse, l_normal)` of the very first batch, before any update.
    pub initial: Option<(f64, f64)>,
    pub best_epoch: Option<usize>,
}

/// Where `train` writes `final.hdck`, `best.hdck` and `train_log.csv`.
#[derive(Clone, Debug)]
pub struct OutputDir(pub PathBuf);

impl OutputDir {
    pub fn final_ckpt(&self) -> PathBuf {
        self.0.join("final.hdck")
    }
    pub fn best_ckpt(&self) -> PathBuf {
        self.0.join("best.hdck")
    }
    pub fn log(&self) -> PathBuf {
        self.0.join("train_log.csv")
    }
}

fn write_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut s = format!("{LOG_HEADER}\n");
    for l in logs {
        s.push_str(&l.csv_row());
        s.push('\n');
    }
    fs::write(path, s).map_err(io_err(path))
}

/// Trains from scratch. Each epoch visits the samples in a seeded shuffled
/// order. With a validation set the best checkpoint minimizes validation
/// RMSE, otherwise the epoch's mean training loss.
///
/// A non-finite loss or gradient aborts with `Error::NonFinite` after
/// saving the last finite parameters as the final checkpoint.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[DepthSample],
    val_set: &[DepthSample],
    out: Option<&OutputDir>,
    mut progress: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if let Some(s) = train_set.iter().chain(val_set).find(|s| (s.width, s.height) != (cfg.width, cfg.height)) {
        return Err(Error::Sample {
            id: s.id.clone(),
            msg: format!("size {}x{} but config expects {}x{}", s.width, s.height, cfg.width, cfg.height),
        });
    }
    if let Some(o) = out {
        fs::create_dir_all(&o.0).map_err(io_err(&o.0))?;
    }
    let (net, mut params) = HdcNet::new(&cfg.model, cfg.seed)?;
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let kv = cfg.to_kv();
    let n = train_set.len();
    let per_epoch = n.div_ceil(cfg.batch);
    let total_steps = match cfg.steps {
        Some(s) => s,
        None => cfg.epochs * per_epoch,
    };
    if total_steps > 0 && n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut logs = Vec::new();
    let mut initial = None;
    let mut best: Option<(f64, usize)> = None;
    let mut step = 0;
    let mut epoch = 0;
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    while step < total_steps {
        epoch += 1;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut sm, mut sn, mut st, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch) {
            if step == total_steps {
                break;
            }
            let samples: Vec<&DepthSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let b = Batch::new(&samples)?;
            let g = Graph::new();
            let p = params.bind(&g);
            let parts = match net
                .forward(&p, g.constant(b.rgb.clone()), g.constant(b.raw.clone()))
                .and_then(|pred| total_loss(pred, &b.gt, &b.mask, cfg.lambda))
            {
                Ok(parts) => Some(parts),
                Err(Error::Tensor(TensorError::NonFinite { .. })) => None,
                Err(e) => return Err(e),
            };
            let (lm, ln, lt) = parts.as_ref().map_or((f64::NAN, f64::NAN, f64::NAN), |parts| {
                (
                    parts.mse.value().item() as f64,
                    parts.normal.value().item() as f64,
                    parts.total.value().item() as f64,
                )
            });
            let bad = if !lt.is_finite() {
                Some("loss".to_string())
            } else {
                let parts = parts.expect("finite loss");
                initial.get_or_insert((lm, ln));
                let grads = p.gradients(&g.backward(parts.total)?);
                drop(p);
                match opt.step(&mut params, &grads, cfg.lr) {
                    Err(Error::NonFinite { what, .. }) => Some(what),
                    r => r.map(|_| None)?,
                }
            };
            if let Some(what) = bad {
                if let Some(o) = out {
                    save_checkpoint(&params, &kv, &o.final_ckpt())?;
                    write_log(&o.log(), &logs)?;
                }
                return Err(Error::NonFinite { what, step: step as u64 + 1 });
            }
            sm += lm;
            sn += ln;
            st += lt;
            batches += 1;
            step += 1;
        }
        let k = batches.max(1) as f64;
        let log = EpochLog {
            epoch,
            l_mse: sm / k,
            l_normal: sn / k,
            total: st / k,
            wall_s: start.elapsed().as_secs_f64(),
        };
        let score = if val_set.is_empty() {
            log.total
        } else {
            evaluate(&net, &params, val_set, false)?.overall.rmse
        };
        if best.is_none_or(|(b, _)| score < b) {
            best = Some((score, epoch));
            if let Some(o) = out {
                save_checkpoint(&params, &kv, &o.best_ckpt())?;
            }
        }
        progress(&log);
        logs.push(log);
    }
    if let Some(o) = out {
        save_checkpoint(&params, &kv, &o.final_ckpt())?;
        if best.is_none() {
            save_checkpoint(&params, &kv, &o.best_ckpt())?;
        }
        write_log(&o.log(), &logs)?;
    }
    Ok(TrainOutcome {
        net,
        params,
        logs,
        steps: step,
        initial,
        best_epoch: best.map(|b| b.1),
    })
}

/// Rebuilds the model recorded in a checkpoint and loads its weights.
pub fn load_model(path: &Path) -> Result<(TrainConfig, HdcNet, ParamStore<f32>)> {
    let (loaded, kv) = load_checkpoint(path)?;
    let cfg = TrainConfig::from_kv(&kv)?;
    let (net, mut params) = HdcNet::new(&cfg.model, cfg.seed)?;
    restore(&mut params, &loaded)?;
    Ok((cfg, net, params))
}
