use std::fs;

use hdc_core::data::{load_all, load_dataset, synthetic_set, write_dataset, HoleMode, SceneSpec};
use hdc_core::Error;

const SCALE: f64 = 1e-4;

#[test]
fn written_dataset_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synthetic_set(&SceneSpec::default(), 40, 3).unwrap();
    write_dataset(dir.path(), "train", &samples, SCALE).unwrap();
    let back = load_all(dir.path(), "train").unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!((a.width, a.height), (b.width, b.height));
        let tol = (SCALE / 2.0 + 1e-6) as f32;
        for (x, y) in a.gt.iter().zip(&b.gt) {
            assert!((x - y).abs() <= tol);
        }
        for (x, y) in a.raw.iter().zip(&b.raw) {
            assert!((x - y).abs() <= tol);
        }
        for (x, y) in a.rgb.iter().zip(&b.rgb) {
            assert!((x - y).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(a.valid, b.valid);
        assert_eq!(a.transparent, b.transparent);
    }
}

#[test]
fn manifest_order_is_kept() {
    let dir = tempfile::tempdir().unwrap();
    let mut samples = synthetic_set(&SceneSpec::default(), 10, 4).unwrap();
    samples.reverse();
    write_dataset(dir.path(), "test", &samples, SCALE).unwrap();
    let m = load_dataset(dir.path(), "test").unwrap();
    let ids: Vec<_> = m.entries.iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["syn000013", "syn000012", "syn000011", "syn000010"]);
    let loaded: Vec<_> = load_all(dir.path(), "test").unwrap().into_iter().map(|s| s.id).collect();
    assert_eq!(loaded, ids);
}

#[test]
fn missing_file_names_the_sample() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synthetic_set(&SceneSpec::default(), 20, 2).unwrap();
    write_dataset(dir.path(), "train", &samples, SCALE).unwrap();
    fs::remove_file(dir.path().join("train/syn000021_gt.pgm")).unwrap();
    match load_all(dir.path(), "train") {
        Err(Error::Sample { id, .. }) => assert_eq!(id, "syn000021"),
        other => panic!("expected a sample error, got {other:?}"),
    }
    let m = load_dataset(dir.path(), "train").unwrap();
    let per: Vec<bool> = m.iter().map(|r| r.is_ok()).collect();
    assert_eq!(per, [true, false]);
}

#[test]
fn mismatched_sizes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = synthetic_set(&SceneSpec::default(), 0, 1).unwrap();
    let b = synthetic_set(&SceneSpec { width: 32, height: 32, ..SceneSpec::default() }, 0, 1).unwrap();
    write_dataset(dir.path(), "a", &a, SCALE).unwrap();
    write_dataset(dir.path(), "b", &b, SCALE).unwrap();
    fs::copy(dir.path().join("b/syn000000_valid.pgm"), dir.path().join("a/syn000000_valid.pgm")).unwrap();
    let err = load_all(dir.path(), "a").unwrap_err().to_string();
    assert!(err.contains("syn000000") && err.contains("valid"), "{err}");
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_all(dir.path(), "train"), Err(Error::Io { .. })));
}

#[test]
fn hole_fraction_matches_ratio() {
    for ratio in [0.3, 0.8] {
        let spec = SceneSpec { hole_ratio: ratio, ..SceneSpec::default() };
        let (mut holes, mut total) = (0usize, 0usize);
        for s in synthetic_set(&spec, 500, 100).unwrap() {
            for (k, &t) in s.transparent.iter().enumerate() {
                if t {
                    total += 1;
                    holes += (s.raw[k] == 0.0) as usize;
                }
            }
        }
        let frac = holes as f64 / total as f64;
        assert!((frac - ratio).abs() < 0.02, "ratio {ratio}: observed {frac} over {total} pixels");
    }
}

#[test]
fn background_holes_read_past_the_object() {
    let spec = SceneSpec { hole_ratio: 1.0, noise_sigma: 0.0, hole_mode: HoleMode::Background, ..SceneSpec::default() };
    for s in synthetic_set(&spec, 0, 10).unwrap() {
        for k in 0..s.gt.len() {
            if s.transparent[k] {
                assert!(s.raw[k] > s.gt[k]);
            } else {
                assert_eq!(s.raw[k], s.gt[k]);
            }
        }
    }
}
