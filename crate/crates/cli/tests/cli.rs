use std::path::Path;
use std::process::{Command, Output};

use hdc_core::data::{read_pgm, synthetic_set, write_dataset, SceneSpec};

fn hdcnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdcnet")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn untrained(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let out = dir.join("run");
    let mut args = vec!["train", "--synthetic", "2", "--epochs", "0", "--size", "32x32", "--quiet", "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = hdcnet(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn zero_epochs_writes_checkpoints_and_header() {
    let dir = tempfile::tempdir().unwrap();
    let out = untrained(dir.path(), &[]);
    for f in ["final.hdck", "best.hdck", "train_log.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_to_string(out.join("train_log.csv")).unwrap(), "epoch,l_mse,l_normal,total,wall_s\n");
}

#[test]
fn eval_on_a_dataset_with_error_maps() {
    let dir = tempfile::tempdir().unwrap();
    let out = untrained(dir.path(), &[]);
    let spec = SceneSpec { width: 32, height: 32, ..SceneSpec::default() };
    write_dataset(&dir.path().join("data"), "test", &synthetic_set(&spec, 5, 2).unwrap(), 1e-4).unwrap();
    let maps = dir.path().join("maps");
    let o = hdcnet(&[
        "eval",
        "--checkpoint",
        s(&out.join("final.hdck")),
        "--data",
        s(&dir.path().join("data")),
        "--per-sample",
        "--error-maps",
        s(&maps),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    let ids: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ids, ["syn000005", "syn000006", "all"]);
    assert!(maps.join("syn000005.pgm").exists());
}

#[test]
fn eval_rejects_other_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let out = untrained(dir.path(), &[]);
    let spec = SceneSpec::default();
    write_dataset(&dir.path().join("data"), "test", &synthetic_set(&spec, 0, 1).unwrap(), 1e-4).unwrap();
    let o = hdcnet(&["eval", "--checkpoint", s(&out.join("final.hdck")), "--data", s(&dir.path().join("data"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("syn000000"));
}

#[test]
fn infer_writes_positive_depth() {
    let dir = tempfile::tempdir().unwrap();
    let out = untrained(dir.path(), &[]);
    let spec = SceneSpec { width: 32, height: 32, ..SceneSpec::default() };
    write_dataset(dir.path(), "x", &synthetic_set(&spec, 9, 1).unwrap(), 1e-4).unwrap();
    let f = |k: &str| dir.path().join(format!("x/syn000009_{k}"));
    let pred = dir.path().join("pred.pgm");
    let err = dir.path().join("err.pgm");
    let o = hdcnet(&[
        "infer",
        "--checkpoint",
        s(&out.join("final.hdck")),
        "--rgb",
        s(&f("rgb.ppm")),
        "--depth",
        s(&f("raw.pgm")),
        "--gt",
        s(&f("gt.pgm")),
        "--out",
        s(&pred),
        "--error-map",
        s(&err),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("rmse,rel,mae"));
    let img = read_pgm(&pred).unwrap();
    assert_eq!((img.width, img.height), (32, 32));
    assert!(img.data.iter().all(|&v| v > 0));
    assert!(err.exists());

    // A 64x48 input does not match the 32x32 checkpoint.
    let big = SceneSpec::default();
    write_dataset(dir.path(), "y", &synthetic_set(&big, 9, 1).unwrap(), 1e-4).unwrap();
    let g = |k: &str| dir.path().join(format!("y/syn000009_{k}"));
    let o = hdcnet(&["infer", "--checkpoint", s(&out.join("final.hdck")), "--rgb", s(&g("rgb.ppm")), "--depth", s(&g("raw.pgm")), "--out", s(&pred)]);
    assert!(!o.status.success());
}

#[test]
fn invalid_config_exits_nonzero() {
    let o = hdcnet(&["train", "--synthetic", "1", "--size", "64x40", "--out", "/nonexistent/x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
    assert!(!hdcnet(&["train"]).status.success());
}
