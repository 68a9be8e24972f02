//! Self-verification at toy sizes: gradient checks of every primitive and
//! block, the scan and metric oracles, and the exact surgery invariants.

use std::fmt;
use std::time::Instant;

use hdc_tensor::gradcheck::{gradcheck, primitive_cases, GradcheckOpts, GradcheckReport};
use hdc_tensor::ops::scan::selective_scan;
use hdc_tensor::{Bound, Graph, ParamStore, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::Attention;
use crate::config::ModelConfig;
use crate::decoder::{channel_attention, down_fusion, down_fusion_trace, spatial_attention, DownFusionParams};
use crate::encoder::{resnet_block, window_attention_block, PatchMerging, ResBlock, SwinBlock};
use crate::error::Result;
use crate::fusion::{channel_excitation, Btmfm, FfnResidual, MhaResidual, Smfm, SsmBlock};
use crate::layers::Builder;
use crate::loss::{loss_mse, loss_normal, total_loss};
use crate::metrics::{metrics, THRESHOLDS};
use crate::model::HdcNet;

#[derive(Clone, Debug)]
pub struct Check {
    /// Acceptance group: 1 gradients, 2 scan oracle, 3 metric oracle, 4 surgery.
    pub group: u8,
    pub module: &'static str,
    pub op: String,
    pub passed: bool,
    pub detail: String,
    pub secs: f64,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} [{}] {}::{} ({:.2}s) {}", self.group, self.module, self.op, self.secs, self.detail)
    }
}

/// Runs one check, turning errors into failures.
fn timed(group: u8, module: &'static str, op: impl Into<String>, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    let t = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    Check {
        group,
        module,
        op: op.into(),
        passed,
        detail,
        secs: t.elapsed().as_secs_f64(),
    }
}

fn gc_verdict(r: &GradcheckReport, tol: f64) -> (bool, String) {
    let mut d = format!("max_rel_err {:.2e} over {} coords", r.max_rel_err, r.checked);
    if r.kinks > 0 {
        d.push_str(&format!(", {} near kinks confirmed one-sided", r.kinks));
    }
    if let Some(w) = &r.worst {
        if r.max_rel_err >= tol {
            d.push_str(&format!(
                "; worst input {} coord {}: analytic {:.6e} numeric {:.6e}",
                w.input, w.coord, w.analytic, w.numeric
            ));
        }
    }
    (r.passed(tol), d)
}

fn tensor_err(e: crate::Error) -> TensorError {
    TensorError::Invalid {
        op: "verify",
        msg: e.to_string(),
    }
}

/// Gradchecks `f` w.r.t. both its inputs and every parameter. Parameters are
/// jittered away from their structured initial values (zero biases, unit
/// gains) so no coordinate sits at a special point.
pub fn block_gradcheck<F>(store: &ParamStore<f32>, inputs: Vec<Tensor<f64>>, opts: &GradcheckOpts, f: F) -> Result<GradcheckReport>
where
    F: for<'g> Fn(&Bound<'g, f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x4a17);
    let params = store.cast::<f64>();
    let k = inputs.len();
    let mut all = inputs;
    for t in params.tensors() {
        let noise = Tensor::<f64>::randn(t.shape().to_vec(), 0.05, &mut rng);
        all.push(Tensor::new(t.shape().to_vec(), t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect())?);
    }
    Ok(gradcheck(
        &all,
        |g, vars| {
            let p = Bound::from_vars(g, vars[k..].to_vec());
            f(&p, &vars[..k]).map_err(tensor_err)
        },
        opts,
    )?)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

fn store_with<R>(seed: u64, f: impl FnOnce(&mut Builder) -> Result<R>) -> Result<(R, ParamStore<f32>)> {
    let mut store = ParamStore::new();
    let r = f(&mut Builder::new(&mut store, seed))?;
    Ok((r, store))
}

/// Gradient checks of every primitive op, every block and the full model.
pub fn gradient_checks(seed: u64, report: &mut dyn FnMut(Check)) {
    let opts = GradcheckOpts {
        seed,
        ..GradcheckOpts::default()
    };
    let tol = opts.tol;
    for case in primitive_cases(seed) {
        report(timed(1, "tensor", case.name, || Ok(gc_verdict(&case.run(&opts)?, tol))));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = (2, 8, 4, 4);
    let map = randn(&[n, c, h, w], &mut rng);
    let map2 = randn(&[n, c, h, w], &mut rng);
    let tokens = randn(&[n, 6, c], &mut rng);

    let mut block = |module: &'static str, op: &str, run: &dyn Fn() -> Result<GradcheckReport>| {
        report(timed(1, module, op, || Ok(gc_verdict(&run()?, tol))));
    };

    block("fusion", "channel_excitation", &|| {
        let (m, s) = store_with(seed, |b| Smfm::new(b, "smfm", c))?;
        block_gradcheck(&s, vec![map.clone()], &opts, |p, v| channel_excitation(&m.rgb, p, v[0]))
    });
    block("fusion", "smfm", &|| {
        let (m, s) = store_with(seed, |b| Smfm::new(b, "smfm", c))?;
        block_gradcheck(&s, vec![map.clone(), map2.clone()], &opts, |p, v| m.forward(p, v[0], v[1]))
    });
    block("fusion", "mha_residual", &|| {
        let (m, s) = store_with(seed, |b| MhaResidual::new(b, c, 2))?;
        block_gradcheck(&s, vec![tokens.clone()], &opts, |p, v| m.forward(p, v[0]))
    });
    block("fusion", "ssm_gated_block", &|| {
        let (m, s) = store_with(seed, |b| SsmBlock::new(b, c, 2 * c, 4, 3))?;
        block_gradcheck(&s, vec![tokens.clone()], &opts, |p, v| m.forward(p, v[0]))
    });
    block("fusion", "ffn_residual", &|| {
        let (m, s) = store_with(seed, |b| FfnResidual::new(b, c))?;
        block_gradcheck(&s, vec![tokens.clone()], &opts, |p, v| m.forward(p, v[0]))
    });
    block("fusion", "btmfm", &|| {
        let cfg = ModelConfig {
            fusion_heads: 2,
            ..ModelConfig::desk()
        };
        let (m, s) = store_with(seed, |b| Btmfm::new(b, &cfg, c, true))?;
        block_gradcheck(&s, vec![map.clone(), map2.clone()], &opts, |p, v| m.forward(p, v[0], v[1]))
    });
    block("attention", "multi_head_attention", &|| {
        let (m, s) = store_with(seed, |b| Attention::new(b, "attn", c, 2))?;
        block_gradcheck(&s, vec![tokens.clone()], &opts, |p, v| m.forward(p, v[0], None))
    });
    block("encoder", "shifted_window_block", &|| {
        let (m, s) = store_with(seed, |b| SwinBlock::new(b, "blk", c, 2, 2))?;
        block_gradcheck(&s, vec![map.clone()], &opts, |p, v| window_attention_block(&m, p, v[0], 2, true))
    });
    block("encoder", "patch_merging", &|| {
        let (m, s) = store_with(seed, |b| PatchMerging::new(b, c))?;
        let x = map.clone().reshape(vec![n, h, w, c])?;
        block_gradcheck(&s, vec![x], &opts, |p, v| m.forward(p, v[0]))
    });
    block("encoder", "resnet_block", &|| {
        let (m, s) = store_with(seed, |b| ResBlock::new(b, "res", c))?;
        block_gradcheck(&s, vec![map.clone()], &opts, |p, v| resnet_block(&m, p, v[0]))
    });
    block("decoder", "spatial_attention", &|| {
        let (m, s) = store_with(seed, |b| DownFusionParams::new(b, "df", c))?;
        block_gradcheck(&s, vec![map.clone()], &opts, |p, v| spatial_attention(&m.spatial, p, v[0]))
    });
    block("decoder", "channel_attention", &|| {
        let (m, s) = store_with(seed, |b| DownFusionParams::new(b, "df", c))?;
        block_gradcheck(&s, vec![map.clone()], &opts, |p, v| channel_attention(&m.channel, p, v[0]))
    });
    block("decoder", "down_fusion", &|| {
        let (m, s) = store_with(seed, |b| DownFusionParams::new(b, "df", 2 * c))?;
        let deep = randn(&[n, 2 * c, h / 2, w / 2], &mut ChaCha8Rng::seed_from_u64(seed ^ 3));
        block_gradcheck(&s, vec![deep, map.clone()], &opts, |p, v| down_fusion(&m, p, v[0], v[1]))
    });

    let empty = ParamStore::new();
    let mut lrng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let pred = Tensor::<f64>::uniform([2, 1, 6, 5], 0.5, 2.0, &mut lrng);
    let gt = Tensor::<f64>::uniform([2, 1, 6, 5], 0.5, 2.0, &mut lrng);
    let mask = Tensor::<f64>::new(vec![2, 1, 6, 5], (0..60).map(|_| (lrng.random::<f64>() < 0.8) as u8 as f64).collect())
        .expect("mask shape");
    block("loss", "loss_mse", &|| {
        block_gradcheck(&empty, vec![pred.clone()], &opts, |_, v| loss_mse(v[0], &gt, &mask))
    });
    block("loss", "loss_normal", &|| {
        block_gradcheck(&empty, vec![pred.clone()], &opts, |_, v| loss_normal(v[0], &gt, &mask))
    });
    block("loss", "total_loss", &|| {
        block_gradcheck(&empty, vec![pred.clone()], &opts, |_, v| Ok(total_loss(v[0], &gt, &mask, 0.1)?.total))
    });

    block("model", "full_model_c4_32x32", &|| {
        let cfg = ModelConfig {
            channels: 4,
            heads: 1,
            ..ModelConfig::default()
        };
        let (net, s) = HdcNet::new(&cfg, seed)?;
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let rgb = Tensor::<f64>::uniform([1, 3, 32, 32], 0.0, 1.0, &mut r);
        let depth = Tensor::<f64>::uniform([1, 1, 32, 32], 0.3, 1.5, &mut r);
        let few = GradcheckOpts {
            max_coords: 2,
            ..opts.clone()
        };
        block_gradcheck(&s, vec![rgb, depth], &few, |p, v| net.forward(p, v[0], v[1]))
    });
}

/// Direct transcription of the recurrence, one scalar at a time.
pub fn naive_scan(x: &Tensor<f64>, delta: &Tensor<f64>, a: &Tensor<f64>, b: &Tensor<f64>, c: &Tensor<f64>) -> Vec<f64> {
    let (n, l, e) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let s = a.shape()[1];
    let mut y = vec![0.0; n * l * e];
    for bi in 0..n {
        for ei in 0..e {
            for si in 0..s {
                let mut h = 0.0;
                for t in 0..l {
                    let dt = delta.get(&[bi, t, ei]);
                    h = (dt * a.get(&[ei, si])).exp() * h + dt * b.get(&[bi, t, si]) * x.get(&[bi, t, ei]);
                    y[(bi * l + t) * e + ei] += c.get(&[bi, t, si]) * h;
                }
            }
        }
    }
    y
}

fn scan_inputs(rng: &mut ChaCha8Rng, n: usize, l: usize, e: usize, s: usize) -> [Tensor<f64>; 5] {
    [
        Tensor::randn([n, l, e], 1.0, rng),
        Tensor::uniform([n, l, e], 0.01, 1.5, rng),
        Tensor::uniform([e, s], -2.0, -0.05, rng),
        Tensor::randn([n, l, s], 1.0, rng),
        Tensor::randn([n, l, s], 1.0, rng),
    ]
}

/// Scan kernel vs the naive recurrence on random sizes, and causality.
pub fn scan_checks(seed: u64, report: &mut dyn FnMut(Check)) {
    report(timed(2, "tensor", "selective_scan/oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca2);
        let mut worst = 0.0f64;
        for _ in 0..50 {
            let (n, l, e, s) = (rng.random_range(1..=2), rng.random_range(1..=16), rng.random_range(1..=8), rng.random_range(1..=4));
            let [x, d, a, b, c] = scan_inputs(&mut rng, n, l, e, s);
            let (y, _) = selective_scan(&x, &d, &a, &b, &c)?;
            let r = naive_scan(&x, &d, &a, &b, &c);
            for (u, v) in y.data().iter().zip(&r) {
                worst = worst.max((u - v).abs());
            }
        }
        Ok((worst <= 1e-5, format!("max |kernel - naive| {worst:.2e} over 50 instances")))
    }));
    report(timed(2, "tensor", "selective_scan/causality", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xca5a);
        let (n, l, e, s) = (2, 12, 5, 3);
        for t in 0..l {
            let [x, d, a, b, c] = scan_inputs(&mut rng, n, l, e, s);
            let (y0, _) = selective_scan(&x, &d, &a, &b, &c)?;
            let bump = |m: &Tensor<f64>, w: usize| {
                let mut m = m.clone();
                for bi in 0..n {
                    for k in 0..w {
                        m.data_mut()[(bi * l + t) * w + k] += 0.75;
                    }
                }
                m
            };
            let (y1, _) = selective_scan(&bump(&x, e), &bump(&d, e), &a, &bump(&b, s), &bump(&c, s))?;
            for bi in 0..n {
                let lo = bi * l * e;
                if y0.data()[lo..lo + t * e] != y1.data()[lo..lo + t * e] {
                    return Ok((false, format!("perturbing token {t} changed an earlier output")));
                }
                if t + 1 < l && y0.data()[lo + t * e..lo + l * e] == y1.data()[lo + t * e..lo + l * e] {
                    return Ok((false, format!("perturbing token {t} changed nothing after it")));
                }
            }
        }
        Ok((true, format!("{l} perturbed positions, prefixes bit-identical")))
    }));
}

/// Reference metrics written as plain loops, independent of the accumulator.
pub fn reference_metrics(pred: &[f64], gt: &[f64], mask: &[bool]) -> [f64; 6] {
    let idx: Vec<usize> = (0..gt.len()).filter(|&i| mask[i] && gt[i] > 0.0).collect();
    let n = idx.len() as f64;
    let rmse = (idx.iter().map(|&i| (pred[i] - gt[i]).powi(2)).sum::<f64>() / n).sqrt();
    let rel = idx.iter().map(|&i| (pred[i] - gt[i]).abs() / gt[i]).sum::<f64>() / n;
    let mae = idx.iter().map(|&i| (pred[i] - gt[i]).abs()).sum::<f64>() / n;
    let delta = |th: f64| {
        let hits = idx
            .iter()
            .filter(|&&i| pred[i] > 0.0 && pred[i] / gt[i] < th && gt[i] / pred[i] < th)
            .count();
        100.0 * hits as f64 / n
    };
    [rmse, rel, mae, delta(THRESHOLDS[0]), delta(THRESHOLDS[1]), delta(THRESHOLDS[2])]
}

pub fn metric_checks(seed: u64, report: &mut dyn FnMut(Check)) {
    report(timed(3, "metrics", "oracle", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3e7);
        let mut worst = 0.0f64;
        let mut monotone = true;
        for _ in 0..100 {
            let gt: Vec<f64> = (0..64).map(|_| if rng.random::<f64>() < 0.1 { 0.0 } else { rng.random_range(0.2..3.0) }).collect();
            let pred: Vec<f64> = gt.iter().map(|&g| g.max(0.5) * rng.random_range(0.7..1.4)).collect();
            let mut mask: Vec<bool> = (0..64).map(|_| rng.random::<f64>() < 0.7).collect();
            mask[0] = true;
            let mut gt = gt;
            gt[0] = gt[0].max(0.2);
            let r = metrics(&pred, &gt, &mask)?;
            let got = [r.rmse, r.rel, r.mae, r.d105, r.d110, r.d125];
            for (a, b) in got.iter().zip(reference_metrics(&pred, &gt, &mask)) {
                worst = worst.max((a - b).abs());
            }
            monotone &= r.d105 <= r.d110 && r.d110 <= r.d125;
        }
        Ok((worst <= 1e-9 && monotone, format!("max |diff| {worst:.2e}, thresholds monotone: {monotone}")))
    }));
    report(timed(3, "metrics", "identity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d);
        let d: Vec<f64> = (0..64).map(|_| rng.random_range(0.2..3.0)).collect();
        let r = metrics(&d, &d, &[true; 64])?;
        let ok = [r.rmse, r.rel, r.mae, r.d105, r.d110, r.d125] == [0.0, 0.0, 0.0, 100.0, 100.0, 100.0];
        Ok((ok, format!("metrics(D, D) = {}", r.csv_row())))
    }));
}

fn plus(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn eye(c: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(vec![c, c, 1, 1]);
    for i in 0..c {
        t.data_mut()[i * c + i] = 1.0;
    }
    t
}

/// Exact consequences of the fusion equations under chosen weights.
pub fn surgery_checks(seed: u64, report: &mut dyn FnMut(Check)) {
    let (n, c, h, w) = (2, 8, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e6);
    let fr = randn(&[n, c, h, w], &mut rng);
    let fd = randn(&[n, c, h, w], &mut rng);
    let deep = randn(&[n, 2 * c, h / 2, w / 2], &mut rng);

    report(timed(4, "fusion", "smfm/saturated_gates_add", || {
        let (m, mut s) = store_with(seed, |b| Smfm::new(b, "smfm", c))?;
        for e in [&m.rgb.expand, &m.depth.expand] {
            s.get_mut(e.w).data_mut().fill(0.0);
            s.get_mut(e.b.expect("expand bias")).data_mut().fill(60.0);
        }
        let s = s.cast::<f64>();
        let g = Graph::new();
        let p = s.bind_frozen(&g);
        let out = m.forward(&p, g.constant(fr.clone()), g.constant(fd.clone()))?;
        let diff = out.value().max_abs_diff(&plus(&fr, &fd));
        Ok((diff <= 1e-6, format!("max |fused - (Fr + Fd)| {diff:.2e}")))
    }));

    let df = |modify: &dyn Fn(&DownFusionParams, &mut ParamStore<f32>)| -> Result<(DownFusionParams, ParamStore<f64>)> {
        let (m, mut s) = store_with(seed, |b| DownFusionParams::new(b, "df", 2 * c))?;
        modify(&m, &mut s);
        Ok((m, s.cast()))
    };
    report(timed(4, "decoder", "down_fusion/midpoint", || {
        let (m, s) = df(&|m, s| {
            s.set(m.out_deep.w, eye(2 * c)).expect("shape");
            s.set(m.out_shallow.w, eye(2 * c)).expect("shape");
            s.get_mut(m.pw.w).data_mut().fill(0.0);
            s.get_mut(m.pw.b.expect("pw bias")).data_mut().fill(0.0);
        })?;
        let g = Graph::new();
        let p = s.bind_frozen(&g);
        let t = down_fusion_trace(&m, &p, g.constant(deep.clone()), g.constant(fr.clone()))?;
        let mid = plus(&deep, &t.aligned.value()).map(|v| 0.5 * v);
        let d1 = t.blended.value().max_abs_diff(&mid);
        let d2 = t.out.value().max_abs_diff(&plus(&mid, &t.sum.value()));
        let wmax = t.weight.value().data().iter().map(|v| (v - 0.5).abs()).fold(0.0, f64::max);
        let ok = d1 <= 1e-6 && d2 <= 1e-6 && wmax == 0.0;
        Ok((ok, format!("|blend - midpoint| {d1:.2e}, |out - (F + midpoint)| {d2:.2e}")))
    }));
    report(timed(4, "decoder", "down_fusion/zero_heads_identity", || {
        let (m, s) = df(&|m, s| {
            for conv in [&m.out_deep, &m.out_shallow] {
                s.get_mut(conv.w).data_mut().fill(0.0);
                s.get_mut(conv.b.expect("bias")).data_mut().fill(0.0);
            }
        })?;
        let g = Graph::new();
        let p = s.bind_frozen(&g);
        let t = down_fusion_trace(&m, &p, g.constant(deep.clone()), g.constant(fr.clone()))?;
        let diff = t.out.value().max_abs_diff(&t.sum.value());
        Ok((diff <= 1e-6, format!("max |F_out - F| {diff:.2e}")))
    }));
}

/// Runs every group in order, passing each result to `report` as it completes.
pub fn run_all(seed: u64, report: &mut dyn FnMut(Check)) {
    gradient_checks(seed, report);
    scan_checks(seed, report);
    metric_checks(seed, report);
    surgery_checks(seed, report);
}

/// Collects every check.
pub fn verify(seed: u64) -> Vec<Check> {
    let mut all = Vec::new();
    run_all(seed, &mut |c| all.push(c));
    all
}
