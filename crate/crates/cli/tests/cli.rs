use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_dsfwsi"));
    c.env("RUST_LOG", "warn").env_remove("DSFWSI_NUM_WORKERS");
    c
}

fn run(args: &[&str], cwd: &Path) -> Output {
    bin().args(args).current_dir(cwd).output().expect("spawn dsfwsi")
}

fn ok(args: &[&str], cwd: &Path) -> Value {
    let out = run(args, cwd);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(stdout.lines().last().unwrap()).unwrap()
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

const CONFIG: &str = r#"{
  "seed": 3,
  "synth": {"slides": 2, "low_size": 768},
  "tiling": {"context_window": 256, "context_step": 256, "target_window": 64, "target_step": 64, "output_size": 32},
  "folds": {"k": 2},
  "pretrain": {"epochs": 2, "batch_size": 4, "encoder": {"base_width": 4}},
  "finetune": {"epochs": 1, "batch_size": 16, "encoder": {"base_width": 4}}
}"#;

fn dataset() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("c.json"), CONFIG).unwrap();
    let v = ok(&["synth", "--config", "c.json", "--out", "d"], dir.path());
    assert_eq!(v["slides"], 2);
    assert_eq!(v["groups"], 18);
    dir
}

#[test]
fn full_pipeline() {
    let dir = dataset();
    let d = dir.path();
    assert!(d.join("d/manifest.csv").exists());
    assert!(d.join("d/resolved_config.json").exists());

    ok(&["pretrain", "--manifest", "d/manifest.csv", "--out", "p", "--config", "c.json"], d);
    let log = std::fs::read_to_string(d.join("p/loss_log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,L_c,L_t,L_fu,L");
    assert_eq!(log.lines().count(), 3);

    ok(
        &["finetune", "--manifest", "d/manifest.csv", "--init", "p/checkpoint", "--fraction", "0.1", "--fold", "0", "--out", "f0", "--config", "c.json"],
        d,
    );
    let m = read_json(d.join("f0/metrics.json"));
    assert_eq!(m["fraction"], 0.1);
    assert_eq!(m["init"], "p/checkpoint");
    assert_eq!(m["train_groups"], 1);
    let snap = read_json(d.join("f0/resolved_config.json"));
    assert_eq!(snap["config"]["finetune"]["fraction"], 0.1);
    assert_eq!(snap["seed"], 3);

    let e = ok(
        &["evaluate", "--manifest", "d/manifest.csv", "--predictions", "f0/predictions", "--out", "e0", "--config", "c.json", "--fold", "0"],
        d,
    );
    let f1 = m["metrics"]["mean_f1"].as_f64().unwrap();
    assert!((e["mean_f1"].as_f64().unwrap() - f1).abs() < 1e-12);

    ok(&["finetune", "--manifest", "d/manifest.csv", "--fold", "1", "--out", "f1", "--config", "c.json"], d);
    let r = ok(&["report", "--runs", "f0", "f1", "--out", "r"], d);
    assert_eq!(r["folds"], 2);
    let csv = std::fs::read_to_string(d.join("r/report.csv")).unwrap();
    assert!(csv.starts_with("fold,class,f1,accuracy,support"));
    let summary = read_json(d.join("r/summary.json"));
    for key in ["mean_f1", "std_f1", "mean_acc", "std_acc", "macro_or_micro"] {
        assert!(summary.get(key).is_some(), "{key}");
    }
}

#[test]
fn seeded_reruns_and_resume_agree() {
    let dir = dataset();
    let d = dir.path();
    let base = ["pretrain", "--manifest", "d/manifest.csv", "--config", "c.json", "--out"];
    ok(&[&base[..], &["a"]].concat(), d);
    ok(&[&base[..], &["b"]].concat(), d);
    let a = std::fs::read(d.join("a/loss_log.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/loss_log.csv")).unwrap());

    // one epoch, then resume to two
    let one = CONFIG.replace("\"epochs\": 2, \"batch_size\": 4", "\"epochs\": 1, \"batch_size\": 4");
    std::fs::write(d.join("one.json"), one).unwrap();
    ok(&["pretrain", "--manifest", "d/manifest.csv", "--config", "one.json", "--out", "c"], d);
    ok(&["pretrain", "--manifest", "d/manifest.csv", "--config", "c.json", "--out", "c", "--resume"], d);
    assert_eq!(a, std::fs::read(d.join("c/loss_log.csv")).unwrap());
}

#[test]
fn resume_with_other_config_is_refused() {
    let dir = dataset();
    let d = dir.path();
    ok(&["pretrain", "--manifest", "d/manifest.csv", "--config", "c.json", "--out", "p"], d);
    let out = run(
        &["pretrain", "--manifest", "d/manifest.csv", "--config", "c.json", "--out", "p", "--resume", "--ablate", "dsl"],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_str(String::from_utf8_lossy(&out.stderr).lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "config_mismatch");
    assert!(err["message"].as_str().unwrap().contains("dsl_enabled: true -> false"));
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(run(&["pretrain", "--bogus"], d).status.code(), Some(2));
    assert_eq!(run(&["frobnicate"], d).status.code(), Some(2));
    std::fs::write(d.join("bad.json"), r#"{"pretrain": {"lr": 1, "batch_size": 0}, "tilling": {}}"#).unwrap();
    let out = run(&["synth", "--config", "bad.json", "--out", "x"], d);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let line = stderr.lines().last().unwrap();
    let err: Value = serde_json::from_str(line).unwrap();
    assert_eq!(err["error"], "config");
    assert_eq!(err["keys"], serde_json::json!(["pretrain.lr", "tilling", "pretrain.batch_size"]));
    assert!(!d.join("x").exists());
}

#[test]
fn missing_manifest_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["pretrain", "--manifest", "nope.csv", "--out", "p"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let err: Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(err["error"], "io");
}

#[test]
fn ablation_flags_reach_the_resolved_config() {
    let dir = dataset();
    let d = dir.path();
    let cases = [
        ("dsl", "dsl_enabled", false),
        ("ctfm", "ctfm_enabled", false),
        ("mask", "mask_only", true),
        ("jigsaw", "jigsaw_only", true),
    ];
    for (flag, key, want) in cases {
        let out = format!("ab_{flag}");
        let one = CONFIG.replace("\"epochs\": 2, \"batch_size\": 4", "\"epochs\": 1, \"batch_size\": 4");
        std::fs::write(d.join("one.json"), one).unwrap();
        ok(&["pretrain", "--manifest", "d/manifest.csv", "--config", "one.json", "--out", &out, "--ablate", flag], d);
        let snap = read_json(d.join(&out).join("resolved_config.json"));
        assert_eq!(snap["config"]["pretrain"][key], want, "--ablate {flag}");
        assert_eq!(snap["run"]["ablate"], serde_json::json!([flag]));
    }
    let out = run(
        &["pretrain", "--manifest", "d/manifest.csv", "--config", "c.json", "--out", "both", "--ablate", "mask", "--ablate", "jigsaw"],
        d,
    );
    assert_eq!(out.status.code(), Some(3));
}
