use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use contra::dataset::load_dataset;
use contra::eval::{raw_feature_baseline, EvalOptions, RetrievalReport};
use serde_json::Value;
use tempfile::TempDir;

fn contra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_contra"))
        .args(args)
        .env_remove("CONTRA_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = contra(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small dataset and a short desk-scale schedule.
fn small_data(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    ok(&["generate", "--out", s(&data), "--videos", "6", "--test-clips", "24", "--seed", "3"]);
    data
}

const SHORT: [&str; 8] = [
    "--override", "total_iters=20",
    "--override", "warmup_iters=5",
    "--override", "batch_size=16",
    "--override", "eval_every=10",
];

fn train(data: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec!["train", "--data", s(data), "--out", s(out), "--preset", "desk"];
    args.extend(SHORT);
    args.extend(extra);
    ok(&args)
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn generate_defaults_load_and_repeat_bitwise() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--out", s(&a), "--seed", "5"]);
    ok(&["generate", "--out", s(&b), "--seed", "5"]);
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.train.len(), 20);
    assert_eq!(ds.train.iter().map(|v| v.clips.len()).sum::<usize>(), 160);
    for f in ["manifest.json", "clip_feats.bin", "token_feats.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m = manifest(&a);
    assert_eq!(m["seed"], 5);
    assert_eq!(m["config"]["ambiguity"], 0.9);
}

#[test]
fn generated_ambiguous_set_defeats_the_raw_baseline() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("d");
    ok(&["generate", "--out", s(&data), "--ambiguity", "0.9", "--seed", "0"]);
    let r = raw_feature_baseline(&load_dataset(&data).unwrap(), &EvalOptions::default()).unwrap();
    let r1 = (r.s2c.unwrap().r1 + r.c2s.unwrap().r1) / 2.0;
    assert!(r1 < 30.0, "raw R@1 {r1}");
}

#[test]
fn generate_rejects_bad_config_and_unwritable_out() {
    let dir = TempDir::new().unwrap();
    let out = contra(&["generate", "--out", s(&dir.path().join("x")), "--ambiguity", "1.5"]);
    assert_eq!(code(&out), 2);
    let file = dir.path().join("file");
    fs::write(&file, b"").unwrap();
    let out = contra(&["generate", "--out", s(&file.join("sub"))]);
    assert_eq!(code(&out), 3);
}

#[test]
fn train_smoke_writes_everything() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    let stdout = train(&data, &run, &["--override", "loss.lambda_uni=12"]);
    let summary: Value = serde_json::from_str(&stdout).unwrap();
    let report: RetrievalReport = serde_json::from_value(summary["final"].clone()).unwrap();
    report.check().unwrap();
    for f in ["train_log.jsonl", "report.json", "final/params.bin", "best/params.bin", "run_manifest.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let m = manifest(&run);
    assert_eq!(m["config"]["loss"]["lambda_uni"], 12.0);
    assert_eq!(m["config"]["model"]["d_v"], 32);
    assert!(m["inputs"].as_object().unwrap().keys().any(|k| k.ends_with("clip_feats.bin")));
    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 22);
}

#[test]
fn config_file_then_overrides_then_flags() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 9, "loss": {"tau": 0.1, "lambda_uni": 3}, "model": {"m": 2}}"#).unwrap();
    let run = dir.path().join("run");
    train(&data, &run, &["--config", s(&cfg), "--override", "loss.tau=0.2", "--m", "0"]);
    let c = &manifest(&run)["config"];
    assert_eq!(c["seed"], 9);
    assert_eq!(c["loss"]["tau"], 0.2);
    assert_eq!(c["loss"]["lambda_uni"], 3.0);
    assert_eq!(c["model"]["m"], 0);
    assert_eq!(c["model"]["d"], 32);

    fs::write(&cfg, r#"{"model": {"bogus": 1}}"#).unwrap();
    let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg)];
    args.extend(SHORT);
    assert_eq!(code(&contra(&args)), 2);
}

#[test]
fn none_and_clip_context_agree_at_m0() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let a = train(&data, &dir.path().join("a"), &["--m", "0", "--context", "none"]);
    let b = train(&data, &dir.path().join("b"), &["--m", "0", "--context", "clip"]);
    assert_eq!(a, b);
}

#[test]
fn train_errors_map_to_exit_codes() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    let base = ["train", "--data", s(&data), "--out", s(&run), "--preset", "desk"];

    let mut args = base.to_vec();
    args.extend(["--override", "nope=1"]);
    assert_eq!(code(&contra(&args)), 2);

    let mut args = base.to_vec();
    args.extend(SHORT);
    args.extend(["--override", "lr_max=1e38"]);
    let out = contra(&args);
    assert_eq!(code(&out), 4);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("iteration"), "{err}");

    let missing = dir.path().join("missing");
    let out = contra(&["train", "--data", s(&missing), "--out", s(&run)]);
    assert_eq!(code(&out), 3);
}

#[test]
fn eval_is_repeatable_and_respects_direction_and_split() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &[]);
    let ck = run.join("final");
    let a = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ck)]);
    let b = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ck)]);
    assert_eq!(a, b);
    let saved: Value = serde_json::from_slice(&fs::read(run.join("report.json")).unwrap()).unwrap();
    let printed: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(saved["final"], printed);

    let s2c: Value = serde_json::from_str(&ok(&["eval", "--data", s(&data), "--checkpoint", s(&ck), "--direction", "s2c"])).unwrap();
    assert!(s2c.get("c2s").is_none());
    assert!(s2c.get("s2c").is_some());

    let out = dir.path().join("ev");
    let train_split = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ck), "--split", "train", "--out", s(&out)]);
    let r: RetrievalReport = serde_json::from_str(&train_split).unwrap();
    assert_eq!(r.s2c.unwrap().ranks.len(), 48);
    assert!(out.join("run_manifest.json").exists());
}

#[test]
fn eval_dimension_mismatch_exits_2() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("run");
    train(&data, &run, &[]);
    let other = dir.path().join("other");
    ok(&["generate", "--out", s(&other), "--videos", "2", "--test-clips", "8", "--dv", "16", "--dw", "16"]);
    let out = contra(&["eval", "--data", s(&other), "--checkpoint", s(&run.join("final"))]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("d_v=32") && err.contains("d_v=16"), "{err}");
}

#[test]
fn ablate_writes_one_row_per_cell() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"total_iters": 10, "warmup_iters": 2, "batch_size": 16, "eval_every": 0}"#).unwrap();
    let grid = dir.path().join("grid.json");
    fs::write(&grid, r#"{"axes": [{"key": "model.m", "values": [0, 1]}, {"key": "loss.tau", "values": [0.07, -1]}]}"#).unwrap();
    let out = dir.path().join("ab");
    ok(&["ablate", "--data", s(&data), "--grid", s(&grid), "--config", s(&cfg), "--preset", "desk", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("cell,seed,model.m,loss.tau,s2c_r1"));
    assert!(lines[1].ends_with(','), "successful cell has an empty error: {}", lines[1]);
    assert!(lines[2].contains("tau"), "failed cell records its error: {}", lines[2]);
    assert!(out.join("run_manifest.json").exists());

    fs::write(&grid, r#"{"axes": []}"#).unwrap();
    let out = contra(&["ablate", "--data", s(&data), "--grid", s(&grid), "--out", s(&dir.path().join("e"))]);
    assert_eq!(code(&out), 2);
}

#[test]
fn gradcheck_tiny_passes() {
    let out: Value = serde_json::from_str(&ok(&["gradcheck", "--seed", "1", "--dims", "tiny"])).unwrap();
    assert!(out["max_rel_err"].as_f64().unwrap() < 1e-4);
    assert!(out["coords"].as_u64().unwrap() > 100);
    assert_eq!(code(&contra(&["gradcheck", "--dims", "huge"])), 2);
}

#[test]
fn analyses_write_csv() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let run = dir.path().join("m0");
    train(&data, &run, &["--m", "0"]);
    let ck = run.join("final");
    let an = dir.path().join("an");

    ok(&["analyze", "attention", "--data", s(&data), "--checkpoint", s(&ck), "--out", s(&an)]);
    let att = fs::read_to_string(an.join("attention.csv")).unwrap();
    assert_eq!(att.lines().collect::<Vec<_>>(), ["layer,offset_0", "0,1"]);

    ok(&["analyze", "rankdelta", "--data", s(&data), "--checkpoint", s(&ck), "--baseline", s(&ck), "--out", s(&an)]);
    let rd = fs::read_to_string(an.join("rank_delta.csv")).unwrap();
    let rows: Vec<&str> = rd.lines().skip(1).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|r| r.ends_with(",0,0,0")), "{rd}");

    ok(&["analyze", "neighbours", "--data", s(&data), "--checkpoint", s(&ck), "--baseline", s(&ck), "--out", s(&an)]);
    let nb = fs::read_to_string(an.join("neighbours.csv")).unwrap();
    assert_eq!(nb.lines().count(), 9);
    let m = manifest(&an);
    assert_eq!(m["config"]["analysis"], "neighbours");
}

#[test]
fn thread_settings_are_validated() {
    let out = Command::new(env!("CARGO_BIN_EXE_contra"))
        .args(["gradcheck", "--dims", "tiny"])
        .env("CONTRA_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(code(&out), 2);
    let out = contra(&["--threads", "2", "gradcheck", "--dims", "tiny"]);
    assert!(out.status.success());
}

#[test]
fn thread_count_does_not_change_training() {
    let dir = TempDir::new().unwrap();
    let data = small_data(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train(&data, &a, &[]);
    train(&data, &b, &["--threads", "3"]);
    for f in ["train_log.jsonl", "final/params.bin", "best/params.bin"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}
