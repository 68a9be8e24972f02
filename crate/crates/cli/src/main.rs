//! `hdcnet`: train, evaluate, ablate, infer and self-verify.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use hdc_core::data::{self, load_all, manifest_path, synthetic_set, DepthSample, SceneSpec};
use hdc_core::eval::{ablate, ablation_csv, check_sizes, evaluate, infer, write_prediction};
use hdc_core::metrics::metrics;
use hdc_core::train::{load_model, parse_size, train, OutputDir, TrainConfig, LOG_HEADER};
use hdc_core::verify::run_all;
use hdc_core::KvConfig;
use hdc_tensor::parallel;

/// Synthetic scenes for training are seeded from here upwards.
const TRAIN_DATA_SEED: u64 = 1000;
/// Synthetic scenes for evaluation are seeded from here upwards.
const TEST_DATA_SEED: u64 = 2000;
const VAL_DATA_SEED: u64 = 3000;

#[derive(Parser)]
#[command(name = "hdcnet", version, about = "Depth completion for transparent and reflective objects")]
struct Cli {
    /// Worker threads for tensor kernels (default: HDC_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run every kernel on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write final/best checkpoints and a per-epoch log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset split or a synthetic set.
    Eval(EvalArgs),
    /// Train and score the four fusion variants with shared data and seed.
    Ablate(AblateArgs),
    /// Complete a single RGB + raw depth pair.
    Infer(InferArgs),
    /// Run gradient checks, oracles and invariants at toy sizes.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    Paper,
}

/// Everything that ends up in a `TrainConfig`. Precedence: preset, then
/// the config file, then `--set`, then dedicated flags.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value config file (`#` starts a comment).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Override any config key, e.g. `--set mlp_ratio=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Input size as WxH.
    #[arg(long)]
    size: Option<String>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Total optimizer steps; overrides --epochs.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_smfm: bool,
    #[arg(long)]
    no_btmfm: bool,
}

impl ConfigArgs {
    fn to_kv(&self) -> Result<KvConfig> {
        let mut kv = KvConfig::new();
        if let Some(p) = self.preset {
            kv.set("preset", if matches!(p, Preset::Paper) { "paper" } else { "desk" });
        }
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file = KvConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
            kv.merge(&file);
        }
        for s in &self.sets {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
            kv.set(k.trim(), v.trim());
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.set(k, v);
            }
        };
        if let Some(size) = &self.size {
            let (w, h) = parse_size(size)?;
            put("width", Some(w.to_string()));
            put("height", Some(h.to_string()));
        }
        put("channels", self.channels.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("steps", self.steps.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("lr", self.lr.map(|v| v.to_string()));
        put("lambda", self.lambda.map(|v| v.to_string()));
        put("weight_decay", self.weight_decay.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        if self.no_smfm {
            kv.set("use_smfm", false);
        }
        if self.no_btmfm {
            kv.set("use_btmfm", false);
        }
        Ok(kv)
    }

    fn resolve(&self) -> Result<TrainConfig> {
        Ok(TrainConfig::from_kv(&self.to_kv()?)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset root with `train.manifest` (and optionally `val.manifest`).
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Train on this many generated scenes instead of a dataset.
    #[arg(long)]
    synthetic: Option<usize>,
    /// Generated validation scenes for best-checkpoint selection.
    #[arg(long, default_value_t = 0)]
    val_synthetic: usize,
    /// First seed of the generated training scenes.
    #[arg(long, default_value_t = TRAIN_DATA_SEED)]
    data_seed: u64,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
    /// Do not echo the epoch log.
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = TEST_DATA_SEED)]
    data_seed: u64,
    /// Add one row per sample.
    #[arg(long)]
    per_sample: bool,
    /// Write an error map per sample into this directory.
    #[arg(long)]
    error_maps: Option<PathBuf>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Dataset root with `train.manifest` and `test.manifest`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    synthetic_train: usize,
    #[arg(long, default_value_t = 16)]
    synthetic_test: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// RGB image (binary PPM).
    #[arg(long)]
    rgb: PathBuf,
    /// Raw depth (binary PGM, 8 or 16 bit).
    #[arg(long)]
    depth: PathBuf,
    /// Ground-truth depth; enables metrics and the error map.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Meters per stored depth unit (default: the checkpoint's).
    #[arg(long)]
    depth_scale: Option<f64>,
    /// Completed depth, 16-bit PGM.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, requires = "gt")]
    error_map: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Fault {
    Scan,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Print only failures and the summary.
    #[arg(long)]
    quiet: bool,
    #[arg(long, value_enum, hide = true)]
    inject_fault: Option<Fault>,
}

fn synthetic(cfg: &TrainConfig, seed: u64, count: usize) -> Result<Vec<DepthSample>> {
    let spec = SceneSpec {
        width: cfg.width,
        height: cfg.height,
        ..SceneSpec::default()
    };
    Ok(synthetic_set(&spec, seed, count)?)
}

fn load_split(root: &Path, split: &str) -> Result<(Vec<DepthSample>, f64)> {
    let m = data::load_dataset(root, split)?;
    let samples = load_all(root, split)?;
    Ok((samples, m.depth_scale))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    let (train_set, val_set) = match (&a.data, a.synthetic) {
        (Some(root), _) => {
            let (tr, scale) = load_split(root, "train")?;
            cfg.depth_scale = scale;
            let val = if manifest_path(root, "val").exists() {
                load_split(root, "val")?.0
            } else {
                Vec::new()
            };
            (tr, val)
        }
        (None, Some(n)) => (synthetic(&cfg, a.data_seed, n)?, synthetic(&cfg, VAL_DATA_SEED, a.val_synthetic)?),
        (None, None) => bail!("give --data DIR or --synthetic N"),
    };
    if !a.quiet {
        println!("{LOG_HEADER}");
    }
    let out = OutputDir(a.out.clone());
    let res = train(&cfg, &train_set, &val_set, Some(&out), |l| {
        if !a.quiet {
            println!("{}", l.csv_row());
        }
    });
    match res {
        Ok(o) => {
            eprintln!(
                "trained {} steps; checkpoints in {} (best epoch {})",
                o.steps,
                a.out.display(),
                o.best_epoch.map_or("-".into(), |e| e.to_string())
            );
            Ok(())
        }
        Err(e @ hdc_core::Error::NonFinite { .. }) => {
            Err(anyhow::Error::new(e).context(format!("training diverged; last finite weights kept in {}", out.final_ckpt().display())))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let (cfg, net, params) = load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let samples = match (&a.data, a.synthetic) {
        (Some(root), _) => load_split(root, &a.split)?.0,
        (None, Some(n)) => synthetic(&cfg, a.data_seed, n)?,
        (None, None) => bail!("give --data DIR or --synthetic N"),
    };
    check_sizes(&cfg, &samples)?;
    let r = evaluate(&net, &params, &samples, a.per_sample)?;
    if let Some(dir) = &a.error_maps {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for (s, pred) in samples.iter().zip(&r.preds) {
            data::write_error_map(&dir.join(format!("{}.pgm", s.id)), pred, &s.gt, &s.eval_mask(), s.width, s.height)?;
        }
    }
    let csv = r.csv(a.per_sample);
    match &a.out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let (train_set, test_set) = match &a.data {
        Some(root) => (load_split(root, "train")?.0, load_split(root, "test")?.0),
        None => (
            synthetic(&cfg, TRAIN_DATA_SEED, a.synthetic_train)?,
            synthetic(&cfg, TEST_DATA_SEED, a.synthetic_test)?,
        ),
    };
    let t = Instant::now();
    let rows = ablate(&cfg, &train_set, &test_set)?;
    let csv = ablation_csv(&rows);
    match &a.out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    eprintln!("ablation finished in {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}

fn cmd_infer(a: &InferArgs) -> Result<()> {
    let (cfg, net, params) = load_model(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let rgb = data::read_ppm(&a.rgb)?;
    let raw = data::read_pgm(&a.depth)?;
    let scale = a.depth_scale.unwrap_or(cfg.depth_scale);
    let pred = infer(&net, &params, &cfg, &rgb, &raw, scale)?;
    write_prediction(&a.out, &pred, rgb.width, rgb.height, scale)?;
    if let Some(gt_path) = &a.gt {
        let gt = data::read_pgm(gt_path)?;
        if (gt.width, gt.height) != (rgb.width, rgb.height) {
            bail!("ground truth is {}x{} but the input is {}x{}", gt.width, gt.height, rgb.width, rgb.height);
        }
        let gt: Vec<f32> = gt.data.iter().map(|&v| (v as f64 * scale) as f32).collect();
        let mask: Vec<bool> = gt.iter().map(|&v| v > 0.0).collect();
        if let Ok(r) = metrics(&pred, &gt, &mask) {
            println!("{}\n{}", hdc_core::metrics::CSV_HEADER, r.csv_row());
        }
        if let Some(p) = &a.error_map {
            data::write_error_map(p, &pred, &gt, &mask, rgb.width, rgb.height)?;
        }
    }
    Ok(())
}

fn cmd_verify(a: &VerifyArgs) -> Result<bool> {
    if let Some(Fault::Scan) = a.inject_fault {
        hdc_tensor::ops::scan::inject_fault(true);
    }
    let t = Instant::now();
    let mut failed = Vec::new();
    let mut total = 0;
    run_all(a.seed, &mut |c| {
        total += 1;
        if !a.quiet || !c.passed {
            println!("{c}");
        }
        if !c.passed {
            failed.push(format!("{}::{}", c.module, c.op));
        }
    });
    let secs = t.elapsed().as_secs_f64();
    if failed.is_empty() {
        println!("verify: all {total} checks passed in {secs:.1}s");
    } else {
        println!("verify: {} of {total} checks failed in {secs:.1}s: {}", failed.len(), failed.join(", "));
    }
    Ok(failed.is_empty())
}

fn run(cli: &Cli) -> Result<bool> {
    parallel::init_threads(cli.threads);
    parallel::force_sequential(cli.sequential);
    match &cli.cmd {
        Cmd::Train(a) => cmd_train(a).map(|_| true),
        Cmd::Eval(a) => cmd_eval(a).map(|_| true),
        Cmd::Ablate(a) => cmd_ablate(a).map(|_| true),
        Cmd::Infer(a) => cmd_infer(a).map(|_| true),
        Cmd::Verify(a) => cmd_verify(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
