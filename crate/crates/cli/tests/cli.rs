use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn cacc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cacc"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("cacc runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

/// Writes a tiny config into `dir` and returns its file name.
fn tiny_config(dir: &Path, tweak: impl FnOnce(&mut Value)) -> PathBuf {
    let out = cacc(dir, &["--print-default-config"]);
    assert_eq!(code(&out), 0);
    let mut cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    cfg["synth"]["train_scenes"] = 4.into();
    cfg["synth"]["test_scenes"] = 3.into();
    cfg["pcs"]["steps"] = 10.into();
    cfg["train"]["pretrain_iterations"] = 6.into();
    cfg["train"]["iterations"] = 6.into();
    cfg["train"]["sppl_refresh"] = 2.into();
    cfg["paths"]["out"] = "run".into();
    tweak(&mut cfg);
    let path = dir.join("cfg.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
    path
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = cacc(dir, args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn default_config_is_valid_json_with_every_section() {
    let dir = tempfile::tempdir().unwrap();
    let out = cacc(dir.path(), &["--print-default-config"]);
    assert_eq!(code(&out), 0);
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["seed", "ablation", "paths", "synth", "anchors", "density", "pcs", "counter", "train"] {
        assert!(cfg.get(key).is_some(), "missing {key}");
    }
    assert_eq!(cfg["ablation"], "full");
}

#[test]
fn usage_and_validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&cacc(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&cacc(dir.path(), &[])), 1);
    assert_eq!(code(&cacc(dir.path(), &["eval", "--config", "absent.json"])), 1);
    tiny_config(dir.path(), |_| {});
    assert_eq!(code(&cacc(dir.path(), &["adapt", "--config", "cfg.json", "--ablation", "all"])), 1);

    tiny_config(dir.path(), |c| c["train"]["crop_size"] = 7.into());
    assert_eq!(code(&cacc(dir.path(), &["gen-data", "--config", "cfg.json"])), 1);

    tiny_config(dir.path(), |c| c["typo"] = 1.into());
    assert_eq!(code(&cacc(dir.path(), &["gen-data", "--config", "cfg.json"])), 1);
}

#[test]
fn missing_prerequisite_is_named() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), |_| {});
    ok(dir.path(), &["gen-data", "--config", "cfg.json"]);
    let out = cacc(dir.path(), &["adapt", "--config", "cfg.json"]);
    assert_eq!(code(&out), 1);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("counter checkpoint") && err.contains("pretrain/counter.ckpt"), "{err}");
}

#[test]
fn non_finite_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    tiny_config(dir.path(), |c| c["train"]["counter_lr"] = 1e30.into());
    ok(dir.path(), &["gen-data", "--config", "cfg.json"]);
    let out = cacc(dir.path(), &["pretrain", "--config", "cfg.json"]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d, |_| {});
    let cfg = ["--config", "cfg.json"];
    let with = |cmd: &str, extra: &[&str]| -> String {
        let mut args = vec![cmd];
        args.extend(cfg);
        args.extend(extra);
        ok(d, &args)
    };

    let printed = with("gen-data", &[]);
    assert!(printed.contains("source: 4 train, 3 test"), "{printed}");
    with("train-pcs", &[]);
    with("seg", &[]);
    with("pretrain", &[]);
    let run = d.join("run");
    for stage in ["data", "pcs", "seg", "pretrain"] {
        let rec = read_json(&run.join(stage).join("run.json"));
        assert_eq!(rec["seed"], 0);
        assert_eq!(rec["config_hash"].as_str().unwrap().len(), 64);
        assert_eq!(rec["version"], env!("CARGO_PKG_VERSION"));
    }
    assert!(run.join("seg/target/0004.seg").exists() && run.join("seg/coverage.json").exists());

    // Source-only adaptation leaves the pretrained counter untouched.
    with("adapt", &["--ablation", "source-only"]);
    with("eval", &["--ablation", "source-only"]);
    let pre = read_json(&run.join("pretrain/report.json"));
    let so = read_json(&run.join("eval/source-only/report.json"));
    assert_eq!(pre["mae"], so["mae"]);
    assert_eq!(pre["rmse"], so["rmse"]);

    // No-PCS mode never touches the weak learner.
    std::fs::rename(run.join("pcs/weak_learner.ckpt"), d.join("hidden.ckpt")).unwrap();
    with("adapt", &["--ablation", "crt-no-pcs"]);
    let out = cacc(d, &["adapt", "--config", "cfg.json", "--ablation", "crt-pcs"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("weak_learner.ckpt"));
    std::fs::rename(d.join("hidden.ckpt"), run.join("pcs/weak_learner.ckpt")).unwrap();

    with("adapt", &[]);
    let first = std::fs::read(run.join("adapt/full/log.jsonl")).unwrap();
    assert_eq!(first.iter().filter(|&&b| b == b'\n').count(), 6);
    let rec: Value = serde_json::from_slice(first.split(|&b| b == b'\n').next().unwrap()).unwrap();
    for key in ["iter", "l_den", "l_crt", "l_cda", "l_total", "n_mean"] {
        assert!(rec.get(key).is_some(), "log lacks {key}");
    }
    with("adapt", &[]);
    assert_eq!(std::fs::read(run.join("adapt/full/log.jsonl")).unwrap(), first, "rerun differs");

    with("eval", &[]);
    let report = read_json(&run.join("eval/full/report.json"));
    let (mae, rmse) = (report["mae"].as_f64().unwrap(), report["rmse"].as_f64().unwrap());
    assert!(rmse >= mae);
    assert!(report["coverage"].as_f64().is_some());
    let csv = std::fs::read_to_string(run.join("eval/full/counts.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3);

    with("eval", &["--oracle"]);
    let oracle = read_json(&run.join("eval/oracle/report.json"));
    assert_eq!(oracle["mae"], 0.0);
    assert_eq!(oracle["rmse"], 0.0);

    let density = run.join("eval/full/density/0004.density");
    let out = with("render", &["--input", density.to_str().unwrap(), "--output", "d.pgm"]);
    assert!(out.contains("d.pgm"));
    let bytes = std::fs::read(d.join("d.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5"));
    let seg = run.join("seg/source/0000.seg");
    with("render", &["--input", seg.to_str().unwrap(), "--output", "s.pgm"]);
    assert!(d.join("s.pgm").exists());
}

#[test]
fn gen_data_seed_override_changes_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    tiny_config(d, |_| {});
    ok(d, &["gen-data", "--config", "cfg.json", "--out", "a"]);
    ok(d, &["gen-data", "--config", "cfg.json", "--out", "b"]);
    ok(d, &["gen-data", "--config", "cfg.json", "--out", "c", "--seed", "9"]);
    let img = |o: &str| std::fs::read(d.join(o).join("data/source/0000.pgm")).unwrap();
    assert_eq!(img("a"), img("b"));
    assert_ne!(img("a"), img("c"));
    assert_eq!(read_json(&d.join("c/data/run.json"))["config"]["synth"]["seed"], 9);
}
