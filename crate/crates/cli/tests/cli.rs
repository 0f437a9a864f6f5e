use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn slpkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slpkit"))
        .args(args)
        .current_dir(dir)
        .env_remove("SLPKIT_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = slpkit(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path, scenario: &str) -> PathBuf {
    let p = dir.join(format!("{scenario}.json"));
    let cfg = serde_json::json!({
        "dataset": {"scenario": scenario, "k": 2, "nt": 3, "l": 4, "n_train": 24, "n_test": 6, "seed": 5, "snr_db": [10.0, 20.0]},
        "network": {"slpn": {"blocks": 1, "width": 4}, "rslpn_a": {"width": 4, "blocks_3d": 1, "blocks_2d": 1, "heads": 2}, "rslpn_b": {"blocks": 1, "width": 4}},
        "train": {"epochs": 2, "batch": 8},
        "eval": {"channels": 8}
    });
    fs::write(&p, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    p
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn gen_writes_manifest_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = small_config(d, "cizf");
    let cfg = cfg.to_str().unwrap();
    ok(d, &["gen", "--config", cfg, "--out", "a"]);
    ok(d, &["gen", "--config", cfg, "--out", "b", "--deterministic"]);
    let a = read_dir_bytes(&d.join("a"));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["manifest.json", "test.slpd", "train.slpd"]);
    assert_eq!(a, read_dir_bytes(&d.join("b")));
    let manifest: serde_json::Value = serde_json::from_slice(&a[0].1).unwrap();
    assert_eq!(manifest["train_count"], 24);
    assert_eq!(manifest["test_count"], 6);
}

#[test]
fn train_then_eval_over_an_snr_grid() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = small_config(d, "cizf");
    let cfg = cfg.to_str().unwrap();
    ok(d, &["gen", "--config", cfg, "--out", "data"]);
    ok(d, &["train", "--config", cfg, "--data", "data", "--out", "m.ckpt", "--deterministic"]);
    ok(d, &["train", "--config", cfg, "--data", "data", "--out", "m2.ckpt", "--deterministic"]);
    assert_eq!(fs::read(d.join("m.ckpt")).unwrap(), fs::read(d.join("m2.ckpt")).unwrap());
    let log = fs::read_to_string(d.join("m.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    ok(d, &["eval", "--config", cfg, "--scheme", "cizf-dl", "--model", "m.ckpt", "--snr", "0:5:30", "--out", "c1.csv"]);
    ok(d, &["eval", "--config", cfg, "--scheme", "cizf-dl", "--model", "m.ckpt", "--snr", "0:5:30", "--out", "c2.csv"]);
    let csv = fs::read_to_string(d.join("c1.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "scheme,snr_db,metric,n_trials,ci_half");
    assert_eq!(rows.len(), 8);
    let snrs: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(snrs, [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]);
    assert_eq!(csv, fs::read_to_string(d.join("c2.csv")).unwrap());

    ok(d, &["eval", "--config", cfg, "--scheme", "zf,cizf,cizf-dl", "--model", "m.ckpt", "--metric", "power", "--thresholds", "0,10", "--out", "p.csv"]);
    let csv = fs::read_to_string(d.join("p.csv")).unwrap();
    assert!(csv.starts_with("scheme,sinr_db,"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn robust_pipeline_writes_both_stages() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = small_config(d, "robust");
    let cfg = cfg.to_str().unwrap();
    ok(d, &["gen", "--config", cfg, "--out", "data"]);
    ok(d, &["train", "--config", cfg, "--data", "data", "--out", "r.ckpt"]);
    assert!(d.join("r.ckpt").exists() && d.join("r.ckpt.b").exists());
    ok(d, &["eval", "--config", cfg, "--scheme", "cimmse,rcimmse,rcimmse-dl", "--model", "r.ckpt", "--metric", "mse", "--snr", "20", "--out", "m.csv"]);
    let csv = fs::read_to_string(d.join("m.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn bench_writes_a_table() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    ok(d, &["bench", "--scheme", "zf,cizf,cizf-dl", "--k", "3", "--nt", "4", "--l", "8", "--reps", "2", "--blocks", "1", "--out", "b.csv"]);
    let csv = fs::read_to_string(d.join("b.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "scheme,k,nt,l,per_symbol_s,reps");
    assert_eq!(csv.lines().count(), 4);
}

#[test]
fn verify_suites_pass() {
    let tmp = TempDir::new().unwrap();
    let out = ok(tmp.path(), &["verify", "--suite", "equivariance"]);
    assert!(out.lines().all(|l| l.starts_with("PASS")), "{out}");
    ok(tmp.path(), &["verify", "--suite", "kkt"]);
    ok(tmp.path(), &["verify", "--suite", "gradients"]);
}

#[test]
fn exit_codes() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let code = |args: &[&str]| slpkit(d, args).status.code();
    // Usage errors.
    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["verify", "--suite", "nope"]), Some(2));
    assert_eq!(code(&["eval", "--scheme", "zf", "--snr", "0:0:3"]), Some(2));
    assert_eq!(code(&["eval", "--scheme", "warp"]), Some(2));
    assert_eq!(code(&["eval", "--scheme", "cizf-dl"]), Some(2));
    assert_eq!(code(&["gen"]), Some(2));
    fs::write(d.join("bad.json"), r#"{"dataset": {"kk": 3}}"#).unwrap();
    assert_eq!(code(&["--config", "bad.json", "gen", "--out", "x"]), Some(2));
    // Runtime failures.
    assert_eq!(code(&["train", "--data", "missing", "--out", "m.ckpt"]), Some(1));
    assert_eq!(code(&["eval", "--scheme", "cizf-dl", "--model", "missing.ckpt"]), Some(1));
}

#[test]
fn data_root_anchors_relative_paths() {
    let tmp = TempDir::new().unwrap();
    let d = tmp.path();
    let cfg = small_config(d, "cizf");
    let work = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_slpkit"))
        .args(["gen", "--config", cfg.to_str().unwrap(), "--out", "rooted"])
        .current_dir(work.path())
        .env("SLPKIT_DATA_ROOT", d)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(d.join("rooted/manifest.json").exists());
    assert!(!work.path().join("rooted").exists());
}
