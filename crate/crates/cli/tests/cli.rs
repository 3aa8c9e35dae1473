use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use canids::model_io;
use canids::nn::{ArchConfig, CnnModel};
use serde_json::Value;
use tempfile::TempDir;

fn canids(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_canids"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn canids")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(dir: &Path, args: &[&str]) {
    let o = canids(dir, args);
    assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
}

const SMALL: &str = r#"{
  "seed": 11,
  "benign": {"duration": 6.0},
  "arch": {"conv_channels": [4, 8], "dense_units": 8},
  "train": {"epochs": 1, "batch_size": 32},
  "quant": {"calibration_windows": 128},
  "bench": {"reps": 40, "warmup": 5}
}"#;

fn small_model(dir: &Path) {
    let m = CnnModel::<f32>::new(ArchConfig::with_channels(&[4, 4]), 3).unwrap();
    model_io::save_float(&m, &dir.join("model")).unwrap();
}

/// Zero weights and a dense output bias of ln 9, so every window scores 0.9.
fn constant_model(dir: &Path) {
    let mut m = CnnModel::<f32>::zeros(ArchConfig::with_channels(&[4, 4])).unwrap();
    m.dense2_mut().bias[0] = 9f32.ln();
    model_io::save_float(&m, &dir.join("const")).unwrap();
}

#[test]
fn detect_on_short_log_writes_header_only() {
    let t = TempDir::new().unwrap();
    small_model(t.path());
    fs::write(
        t.path().join("short.csv"),
        "0.000000,0100,0\n0.000100,0200,1,ff\n0.000200,0300,0,R\n",
    )
    .unwrap();
    ok(t.path(), &["detect", "--model", "model", "--log", "short.csv", "--out", "v.csv"]);
    assert_eq!(fs::read_to_string(t.path().join("v.csv")).unwrap(), "timestamp,id,score,verdict\n");
}

#[test]
fn detect_emits_one_row_per_full_window() {
    let t = TempDir::new().unwrap();
    constant_model(t.path());
    let log: String = (0..6).map(|i| format!("0.00{i}000,0{i}10,0\n")).collect();
    fs::write(t.path().join("six.csv"), log).unwrap();
    ok(t.path(), &["detect", "--model", "const", "--log", "six.csv", "--out", "v.csv"]);
    let text = fs::read_to_string(t.path().join("v.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows, ["0.003000,0310,0.900000,attack", "0.004000,0410,0.900000,attack", "0.005000,0510,0.900000,attack"]);
}

#[test]
fn constant_scorer_report_matches_hand_count() {
    let t = TempDir::new().unwrap();
    constant_model(t.path());
    // 10 frames -> 7 windows; the newest frames of windows 3..=9 carry the labels
    let flags = ["R", "R", "R", "R", "T", "R", "T", "T", "R", "R"];
    let log: String = flags
        .iter()
        .enumerate()
        .map(|(i, f)| format!("{:.6},0{:03x},0,{f}\n", i as f64 * 0.001, 0x100 + i))
        .collect();
    fs::write(t.path().join("l.csv"), log).unwrap();
    ok(
        t.path(),
        &["--frozen-clock", "evaluate", "--model", "const", "--log", "l.csv", "--attack", "dos", "--out", "r.json"],
    );
    let v: Value = serde_json::from_str(&fs::read_to_string(t.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(v["tool"], "canids");
    assert_eq!(v["command"], "evaluate");
    assert_eq!(v["generated_at_unix"], 0);
    let r = &v["report"];
    assert_eq!(r["samples"], 7);
    assert_eq!(r["attack"], "dos");
    assert_eq!(r["model_kind"], "float");
    // windows end at frames 3..=9: labels R,T,R,T,T,R,R -> 3 attacks, 4 benign, all flagged
    assert_eq!(r["confusion"], serde_json::json!({"tn": 0, "fp": 4, "fn": 0, "tp": 3}));
    let m = &r["metrics"];
    assert_eq!(m["precision"].as_f64().unwrap(), 3.0 / 7.0);
    assert_eq!(m["recall"].as_f64().unwrap(), 1.0);
    assert!((m["f1"].as_f64().unwrap() - 0.6).abs() < 1e-12);
    assert_eq!(m["fpr"].as_f64().unwrap(), 1.0);
    assert_eq!(r["auc"].as_f64().unwrap(), 0.5);

    // threshold above the constant score flips every verdict
    ok(
        t.path(),
        &["evaluate", "--model", "const", "--log", "l.csv", "--attack", "dos", "--threshold", "0.95", "--out", "r2.json"],
    );
    let v: Value = serde_json::from_str(&fs::read_to_string(t.path().join("r2.json")).unwrap()).unwrap();
    assert_eq!(v["report"]["confusion"], serde_json::json!({"tn": 4, "fp": 0, "fn": 3, "tp": 0}));
    assert!(v["generated_at_unix"].as_u64().unwrap() > 0);
}

#[test]
fn full_pipeline_smoke() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    fs::write(d.join("cfg.json"), SMALL).unwrap();
    let c = ["--config", "cfg.json", "--frozen-clock"];
    let run = |rest: &[&str]| {
        let args: Vec<&str> = c.iter().chain(rest).copied().collect();
        ok(d, &args);
    };
    run(&["generate", "--out", "logs/benign.csv"]);
    run(&["inject", "--input", "logs/benign.csv", "--attack", "dos", "--out", "logs/dos.csv"]);
    run(&["inject", "--input", "logs/benign.csv", "--attack", "fuzzing", "--out", "logs/fuzz.csv"]);
    run(&["train", "--dos", "logs/dos.csv", "--fuzz", "logs/fuzz.csv", "--out", "float", "--history", "hist.json", "--checkpoints", "ckpt"]);
    run(&["quantize", "--model", "float", "--calib", "logs/dos.csv", "--out", "q", "--report", "q.json"]);
    run(&["evaluate", "--model", "q", "--log", "logs/fuzz.csv", "--out", "eval.json", "--roc", "roc.csv"]);
    run(&["bench", "--model", "q", "--out", "bench.json"]);
    run(&["detect", "--model", "float", "--log", "logs/dos.csv", "--out", "det.csv"]);

    let read = |p: &str| -> Value { serde_json::from_str(&fs::read_to_string(d.join(p)).unwrap()).unwrap() };
    let h = read("hist.json");
    assert_eq!(h["config"]["seed"], 11);
    for key in ["dos_history", "fuzz_history", "phase1_dos_report", "dos_report", "fuzz_report", "model_digest"] {
        assert!(!h["report"][key].is_null(), "missing {key}");
    }
    assert_eq!(h["report"]["dos_history"]["epochs"].as_array().unwrap().len(), 1);
    assert!(d.join("ckpt/dos/epoch_001/manifest.json").exists());
    assert!(d.join("ckpt/fuzzing/epoch_001/manifest.json").exists());

    let e = read("eval.json");
    assert_eq!(e["report"]["attack"], "fuzzing");
    assert_eq!(e["report"]["model_kind"], "quant");
    let auc = e["report"]["auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    assert!(fs::read_to_string(d.join("roc.csv")).unwrap().starts_with("threshold,fpr,tpr\n"));

    let q = read("q.json");
    assert_eq!(q["report"]["quant_digest"], e["report"]["model_digest"]);

    let b = read("bench.json");
    assert_eq!(b["report"]["stats"]["count"], 35);
    assert!((b["report"]["budget"]["frame_time"].as_f64().unwrap() - 135e-6).abs() < 1e-12);

    let frames = fs::read_to_string(d.join("logs/dos.csv")).unwrap().lines().count();
    let rows = fs::read_to_string(d.join("det.csv")).unwrap().lines().count();
    assert_eq!(rows, frames - 3 + 1);

    // same seed, same bytes
    let again = TempDir::new().unwrap();
    fs::write(again.path().join("cfg.json"), SMALL).unwrap();
    ok(again.path(), &["--config", "cfg.json", "generate", "--out", "b.csv"]);
    assert_eq!(fs::read(d.join("logs/benign.csv")).unwrap(), fs::read(again.path().join("b.csv")).unwrap());
}

#[test]
fn usage_errors_exit_1() {
    let t = TempDir::new().unwrap();
    let o = canids(t.path(), &["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("canids: error[usage]:"), "{}", stderr(&o));
    assert_eq!(code(&canids(t.path(), &["detect", "--model", "m"])), 1);
    assert_eq!(code(&canids(t.path(), &["inject", "--input", "a", "--attack", "spoof", "--out", "b"])), 1);
    assert_eq!(code(&canids(t.path(), &["--help"])), 0);
    assert_eq!(code(&canids(t.path(), &["--version"])), 0);
}

#[test]
fn config_errors_exit_1() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("bad.json"), r#"{"trian": {}}"#).unwrap();
    let o = canids(t.path(), &["--config", "bad.json", "generate", "--out", "x.csv"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).starts_with("canids: error[config]:"), "{}", stderr(&o));
    fs::write(t.path().join("neg.json"), r#"{"threshold": 1.5}"#).unwrap();
    assert_eq!(code(&canids(t.path(), &["--config", "neg.json", "generate", "--out", "x.csv"])), 1);
    assert_eq!(code(&canids(t.path(), &["--config", "absent.json", "generate", "--out", "x.csv"])), 1);
    assert_eq!(code(&canids(t.path(), &["generate", "--out", "x.csv", "--duration", "-1"])), 1);
}

#[test]
fn data_errors_exit_2() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    small_model(d);
    let o = canids(d, &["detect", "--model", "model", "--log", "missing.csv", "--out", "v.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).starts_with("canids: error[data]:"), "{}", stderr(&o));

    fs::write(d.join("bad.csv"), "0.0,0100,2,aa\n").unwrap();
    assert_eq!(code(&canids(d, &["detect", "--model", "model", "--log", "bad.csv", "--out", "v.csv"])), 2);
    fs::write(d.join("wide.csv"), "0.0,0900,0,R\n").unwrap();
    assert_eq!(code(&canids(d, &["detect", "--model", "model", "--log", "wide.csv", "--out", "v.csv"])), 2);

    // unlabelled rows are rejected by evaluate
    fs::write(d.join("bare.csv"), "0.0,0100,0\n").unwrap();
    assert_eq!(code(&canids(d, &["evaluate", "--model", "model", "--log", "bare.csv", "--attack", "dos", "--out", "r.json"])), 2);

    fs::write(d.join("ok.csv"), "0.0,0100,0,R\n0.001,0100,0,R\n0.002,0100,0,R\n0.003,0100,0,R\n").unwrap();
    assert_eq!(code(&canids(d, &["evaluate", "--model", "model", "--log", "ok.csv", "--out", "r.json"])), 2);

    let blob = d.join("model/tensors/dense2.bias.bin");
    let mut bytes = fs::read(&blob).unwrap();
    bytes[0] ^= 1;
    fs::write(&blob, bytes).unwrap();
    let o = canids(d, &["detect", "--model", "model", "--log", "ok.csv", "--out", "v.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("checksum"), "{}", stderr(&o));
    assert_eq!(code(&canids(d, &["detect", "--model", "nowhere", "--log", "ok.csv", "--out", "v.csv"])), 2);
}

#[test]
fn runtime_errors_exit_3() {
    let t = TempDir::new().unwrap();
    let d = t.path();
    small_model(d);
    fs::write(d.join("ok.csv"), "0.0,0100,0,R\n0.001,0100,0,R\n0.002,0100,0,R\n0.003,0100,0,R\n").unwrap();
    fs::write(d.join("blocker"), "").unwrap();
    let o = canids(d, &["detect", "--model", "model", "--log", "ok.csv", "--out", "blocker/v.csv"]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).starts_with("canids: error[runtime]:"), "{}", stderr(&o));
}
