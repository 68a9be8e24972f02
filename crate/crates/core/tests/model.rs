use std::fs;

use hdc_core::data::{synthetic_set, SceneSpec};
use hdc_core::eval::{evaluate, predict};
use hdc_core::train::{load_model, train, OutputDir, TrainConfig};
use hdc_core::{Error, HdcNet, ModelConfig};
use hdc_tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn forward_shape(cfg: &ModelConfig, n: usize, h: usize, w: usize) -> Tensor<f32> {
    let (net, params) = HdcNet::new(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rgb = Tensor::<f32>::uniform([n, 3, h, w], 0.0, 1.0, &mut rng);
    let depth = Tensor::<f32>::uniform([n, 1, h, w], 0.0, 2.0, &mut rng);
    let g = Graph::new();
    let p = params.bind_frozen(&g);
    let out = net.forward(&p, g.constant(rgb), g.constant(depth)).unwrap().value();
    (*out).clone()
}

#[test]
fn output_is_positive_and_matches_input_size() {
    let variants = [
        ModelConfig::desk(),
        ModelConfig { use_smfm: false, ..ModelConfig::desk() },
        ModelConfig { use_btmfm: false, ..ModelConfig::desk() },
        ModelConfig { use_smfm: false, use_btmfm: false, rgbd_input: false, ..ModelConfig::desk() },
        ModelConfig { channels: 4, heads: 1, fusion_heads: 1, blocks: 1, ..ModelConfig::desk() },
    ];
    for cfg in &variants {
        for (h, w) in [(32, 32), (48, 64), (40, 72)] {
            let out = forward_shape(cfg, 2, h, w);
            assert_eq!(out.shape(), [2, 1, h, w], "{cfg:?}");
            assert!(out.data().iter().all(|&v| v > 0.0 && v.is_finite()), "{cfg:?}");
        }
    }
}

#[test]
fn paper_preset_runs_at_full_size() {
    let cfg = TrainConfig::paper();
    let out = forward_shape(&cfg.model, 1, cfg.height, cfg.width);
    assert_eq!(out.shape(), [1, 1, 240, 320]);
    assert!(out.data().iter().all(|&v| v > 0.0 && v.is_finite()));
}

#[test]
fn mismatched_inputs_are_rejected() {
    let (net, params) = HdcNet::new(&ModelConfig::desk(), 0).unwrap();
    let g = Graph::new();
    let p = params.bind_frozen(&g);
    let rgb = g.constant(Tensor::<f32>::zeros([1, 3, 32, 32]));
    assert!(net.forward(&p, rgb, g.constant(Tensor::zeros([1, 1, 32, 64]))).is_err());
    assert!(net.forward(&p, rgb, g.constant(Tensor::zeros([2, 1, 32, 32]))).is_err());
    assert!(net.forward(&p, rgb, rgb).is_err());
}

fn small() -> (TrainConfig, Vec<hdc_core::data::DepthSample>) {
    let cfg = TrainConfig {
        width: 32,
        height: 32,
        epochs: 2,
        batch: 2,
        ..TrainConfig::desk()
    };
    let spec = SceneSpec { width: 32, height: 32, ..SceneSpec::default() };
    (cfg, synthetic_set(&spec, 100, 3).unwrap())
}

fn strip_wall(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn training_is_deterministic() {
    let (cfg, data) = small();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let out = train(&cfg, &data, &data[..1], Some(&OutputDir(d.path().into())), |_| {}).unwrap();
        assert_eq!(out.steps, 4);
        assert_eq!(out.logs.len(), 2);
    }
    let read = |i: usize, f: &str| fs::read(dirs[i].path().join(f)).unwrap();
    assert_eq!(read(0, "final.hdck"), read(1, "final.hdck"));
    assert_eq!(read(0, "best.hdck"), read(1, "best.hdck"));
    let logs = [0, 1].map(|i| strip_wall(&String::from_utf8(read(i, "train_log.csv")).unwrap()));
    assert_eq!(logs[0], logs[1]);
    assert_eq!(logs[0][0], "epoch,l_mse,l_normal,total");
}

#[test]
fn reloaded_checkpoint_reproduces_eval() {
    let (cfg, data) = small();
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir(dir.path().into());
    let trained = train(&cfg, &data, &[], Some(&out), |_| {}).unwrap();
    let (cfg2, net, params) = load_model(&out.final_ckpt()).unwrap();
    assert_eq!(cfg2, cfg);
    for (a, b) in trained.params.tensors().iter().zip(params.tensors()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let before = evaluate(&trained.net, &trained.params, &data, true).unwrap();
    let after = evaluate(&net, &params, &data, true).unwrap();
    assert_eq!(before.csv(true), after.csv(true));
    assert_eq!(before.csv(false), after.csv(false));
    assert_eq!(predict(&net, &params, &data).unwrap(), before.preds);
}

#[test]
fn zero_epochs_still_write_checkpoints() {
    let (cfg, data) = small();
    let cfg = TrainConfig { epochs: 0, ..cfg };
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir(dir.path().into());
    let r = train(&cfg, &data, &[], Some(&out), |_| {}).unwrap();
    assert_eq!(r.steps, 0);
    let (_, _, fresh) = HdcNet::new(&cfg.model, cfg.seed).map(|(n, p)| (cfg.clone(), n, p)).unwrap();
    let (_, _, loaded) = load_model(&out.best_ckpt()).unwrap();
    assert_eq!(loaded.tensors(), fresh.tensors());
    assert!(out.final_ckpt().exists());
}

#[test]
fn divergence_aborts_and_keeps_last_checkpoint() {
    let (cfg, data) = small();
    let cfg = TrainConfig { lr: 1e30, weight_decay: 0.0, epochs: 20, ..cfg };
    let dir = tempfile::tempdir().unwrap();
    let out = OutputDir(dir.path().into());
    match train(&cfg, &data, &[], Some(&out), |_| {}) {
        Err(Error::NonFinite { step, .. }) => assert!(step >= 1),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("training with lr 1e30 did not diverge"),
    }
    let (_, _, params) = load_model(&out.final_ckpt()).unwrap();
    assert!(params.tensors().iter().all(|t| t.is_finite()));
    assert!(out.log().exists());
}

#[test]
fn wrong_sample_size_is_rejected() {
    let (cfg, _) = small();
    let other = synthetic_set(&SceneSpec::default(), 0, 1).unwrap();
    match train(&cfg, &other, &[], None, |_| {}) {
        Err(Error::Sample { id, .. }) => assert_eq!(id, "syn000000"),
        r => panic!("{:?}", r.err()),
    }
}
