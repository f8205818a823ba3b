mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn idian(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_idian"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_tiny_config(dir: &Path) -> String {
    let mut cfg = common::tiny_config();
    cfg.name = "tiny".into();
    cfg.run.repeats = 2;
    cfg.run.variants = vec!["full".parse().unwrap(), "target_only".parse().unwrap()];
    cfg.run.out_dir = dir.join("results");
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml().unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn gradcheck_passes() {
    let out = idian(&["gradcheck", "--seed", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("routed/discriminator"));
    assert!(!text.contains("FAIL"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());

    let out = idian(&["train", "--config", &cfg, "--variant", "cdan"]);
    assert_eq!(out.status.code(), Some(2));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\neta = -1.0\n").unwrap();
    let out = idian(&["experiment", "--config", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("eta"));

    let out = idian(&["experiment", "--config", &cfg, "--missing-rate", "1.0"]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("missing.toml");
    fs::write(
        &missing,
        "[data]\nsource_path = \"/nonexistent/s.csv\"\ntarget_path = \"/nonexistent/t.csv\"\nn_classes = 2\n",
    )
    .unwrap();
    let out = idian(&["prepare", "--config", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));

    let out = idian(&["experiment", "--config", "/nonexistent/config.toml"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn prepare_train_evaluate_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let data = dir.path().join("data");
    let out = idian(&["prepare", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["source.csv", "target_train.csv", "target_train_mask.csv", "test.csv", "test_mask.csv"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let run = dir.path().join("run");
    let out = idian(&["train", "--config", &cfg, "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("seed0.json")).unwrap()).unwrap();

    let out = idian(&[
        "evaluate",
        "--checkpoint",
        run.join("model.ckpt").to_str().unwrap(),
        "--test",
        data.join("test.csv").to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let acc = report["acc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    assert_eq!(report["n_eval"], record["eval"]["n_eval"]);
}

#[test]
fn experiment_writes_records_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = idian(&["experiment", "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let root = dir.path().join("results").join("tiny");
    for v in ["full", "target_only"] {
        for k in 0..2 {
            assert!(root.join(v).join(format!("seed{k}.json")).exists());
        }
    }
    let summary = fs::read_to_string(root.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    let history = fs::read_to_string(root.join("history.csv")).unwrap();
    assert!(history.starts_with("variant,repeat,step,epoch"));
    assert!(history.lines().count() > 1);
}
