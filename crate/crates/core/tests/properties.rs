use hdc_core::checkpoint::{decode, encode};
use hdc_core::data::{gen_synthetic, HoleMode, SceneSpec};
use hdc_core::metrics::metrics;
use hdc_core::verify::reference_metrics;
use hdc_core::{Error, KvConfig};
use hdc_tensor::{ParamStore, Tensor};
use proptest::prelude::*;
use std::path::Path;

fn spec() -> impl Strategy<Value = SceneSpec> {
    (any::<u64>(), 1usize..4, 1usize..4, 1usize..5, 0.0..=1.0f64, 0.0..0.01f64, any::<bool>()).prop_map(
        |(seed, w, h, primitives, hole_ratio, noise_sigma, bg)| SceneSpec {
            seed,
            width: 16 * w,
            height: 16 * h,
            primitives,
            hole_ratio,
            noise_sigma,
            hole_mode: if bg { HoleMode::Background } else { HoleMode::Zero },
        },
    )
}

fn pairs() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..200).prop_flat_map(|n| (prop::collection::vec(0.05..5.0f64, n), prop::collection::vec(0.05..5.0f64, n)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn synthetic_sample_invariants(s in spec()) {
        let a = gen_synthetic(&s).unwrap();
        prop_assert_eq!(gen_synthetic(&s).unwrap(), a.clone());
        let n = s.width * s.height;
        prop_assert_eq!(a.rgb.len(), 3 * n);
        prop_assert!(a.rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(a.gt.iter().all(|&g| g > 0.0 && g.is_finite()));
        prop_assert!(a.valid.iter().all(|&v| v));
        // The first primitive is transparent; later opaque ones may hide it.
        if s.primitives == 1 {
            prop_assert!(a.transparent.iter().any(|&t| t));
        }
        let clip = 3.0 * s.noise_sigma as f32 + 1e-6;
        for k in 0..n {
            prop_assert!(a.raw[k] >= 0.0);
            if !a.transparent[k] {
                prop_assert!((a.raw[k] - a.gt[k]).abs() <= clip);
            } else if s.hole_mode == HoleMode::Background && a.raw[k] != 0.0 {
                prop_assert!(a.raw[k] > a.gt[k] - clip);
            }
        }
        // Holes come in aligned 2x2 cells.
        if s.hole_mode == HoleMode::Zero {
            for y in (0..s.height).step_by(2) {
                for x in (0..s.width).step_by(2) {
                    let cell = [(0, 0), (0, 1), (1, 0), (1, 1)].map(|(dy, dx)| (y + dy) * s.width + x + dx);
                    let holes = cell.iter().filter(|&&k| a.transparent[k] && a.raw[k] == 0.0).count();
                    let transparent = cell.iter().filter(|&&k| a.transparent[k]).count();
                    prop_assert!(holes == 0 || holes == transparent);
                }
            }
        }
    }

    #[test]
    fn metric_inequalities((pred, gt) in pairs(), drop in 0usize..4) {
        let mask: Vec<bool> = (0..pred.len()).map(|i| i % 4 != drop || pred.len() == 1).collect();
        let r = metrics(&pred, &gt, &mask).unwrap();
        prop_assert!(r.rmse + 1e-12 >= r.mae);
        prop_assert!(r.d105 <= r.d110 && r.d110 <= r.d125 && r.d125 <= 100.0);
        prop_assert!(r.rel >= 0.0);
        let want = reference_metrics(&pred, &gt, &mask);
        let got = [r.rmse, r.rel, r.mae, r.d105, r.d110, r.d125];
        for (a, b) in got.iter().zip(want) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
        let same = metrics(&gt, &gt, &mask).unwrap();
        prop_assert_eq!((same.rmse, same.rel, same.mae, same.d105), (0.0, 0.0, 0.0, 100.0));
    }

    #[test]
    fn metrics_scale_with_depth((pred, gt) in pairs(), k in 0.1..10.0f64) {
        let mask = vec![true; pred.len()];
        let a = metrics(&pred, &gt, &mask).unwrap();
        let sp: Vec<f64> = pred.iter().map(|v| v * k).collect();
        let sg: Vec<f64> = gt.iter().map(|v| v * k).collect();
        let b = metrics(&sp, &sg, &mask).unwrap();
        prop_assert!((b.rmse - k * a.rmse).abs() <= 1e-9 * b.rmse.max(1.0));
        prop_assert!((b.rel - a.rel).abs() <= 1e-9);
        prop_assert_eq!((a.d105, a.d110, a.d125), (b.d105, b.d110, b.d125));
    }

    #[test]
    fn checkpoint_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..5, 0..4), 1..6),
        seed in any::<u64>(),
        pos in any::<prop::sample::Index>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        for (i, s) in shapes.iter().enumerate() {
            store.add(format!("p{i}.w"), Tensor::randn(s.clone(), 1.0, &mut rng)).unwrap();
        }
        let mut kv = KvConfig::new();
        kv.set("seed", seed);
        let bytes = encode(&store, &kv);
        let (back, kv2) = decode(Path::new("x"), &bytes).unwrap();
        prop_assert_eq!(&kv2, &kv);
        prop_assert_eq!(back.len(), store.len());
        for ((n1, t1), (n2, t2)) in store.iter().zip(back.iter()) {
            prop_assert_eq!(n1, n2);
            prop_assert_eq!(t1.shape(), t2.shape());
            let same = t1.data().iter().zip(t2.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
        prop_assert_eq!(encode(&back, &kv2), bytes.clone());
        // Any flipped byte in the tensor table is detected.
        let table = 16 + kv.to_text().len();
        let mut bad = bytes.clone();
        let i = table + pos.index(bad.len() - table);
        bad[i] ^= 0x41;
        prop_assert!(decode(Path::new("x"), &bad).is_err());
    }
}

#[test]
fn corrupted_payload_names_tensor() {
    let mut store = ParamStore::<f32>::new();
    store.add("first", Tensor::ones([3])).unwrap();
    store.add("second", Tensor::ones([2, 2])).unwrap();
    let mut bytes = encode(&store, &KvConfig::new());
    let n = bytes.len();
    bytes[n - 6] ^= 1;
    match decode(Path::new("c.hdck"), &bytes) {
        Err(Error::Checksum { name, .. }) => assert_eq!(name, "second"),
        other => panic!("{other:?}"),
    }
}
