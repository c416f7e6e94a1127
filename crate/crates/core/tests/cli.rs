mod common;

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn plast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plast"))
        .args(args)
        .env("PLAST_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) {
    let out = plast(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn select_on_reference_stats() {
    let dir = tempfile::tempdir().unwrap();
    let stats = common::fixture("reference_stats.json");
    ok(&["select", "--stats", s(&stats), "--out", s(dir.path())]);
    let sel = json(&dir.path().join("selection.json"));
    assert_eq!(sel["boundary_layer"], 9);
    assert_eq!(sel["K"], serde_json::json!([1, 2, 3, 4, 5, 6, 7, 8]));
    assert_eq!(sel["selected"], serde_json::json!([1, 2, 4]));
    let cfg = json(&dir.path().join("resolved_config.json"));
    assert_eq!(cfg["command"], "select");
    assert_eq!(cfg["config"]["include_english"], true);
}

#[test]
fn failures_emit_error_json() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = plast(&["select", "--stats", s(&missing), "--out", s(dir.path())]);
    assert!(!out.status.success());
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("nope.json"));

    let out = plast(&["analyze", "--traces", s(dir.path()), "--out", s(dir.path())]);
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "empty");
}

#[test]
fn small_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("spec.json");
    std::fs::write(
        &cfg,
        r#"{"n_languages": 2, "n_pretrain": 40, "n_train": 24, "n_eval": 8, "n_monitor": 6}"#,
    )
    .unwrap();
    let model_cfg = root.join("model.json");
    std::fs::write(
        &model_cfg,
        r#"{"model": {"n_layers": 3, "d_model": 16, "d_inter": 32, "n_heads": 2}, "pretrain": {"epochs": 1}}"#,
    )
    .unwrap();
    let data = root.join("data");
    let pre = root.join("pre");
    let traces = root.join("traces");
    let traces2 = root.join("traces2");
    let analysis = root.join("analysis");
    let trained = root.join("trained");
    let lens_out = root.join("lens");

    ok(&["gen", "--config", s(&cfg), "--seed", "3", "--out", s(&data)]);
    for f in ["spec.json", "tokenizer.json", "pretrain.jsonl", "train.jsonl", "eval.jsonl", "questions.jsonl"] {
        assert!(data.join(f).exists(), "{f}");
    }
    ok(&["pretrain", "--data", s(&data), "--config", s(&model_cfg), "--out", s(&pre)]);
    let ckpt = pre.join("model.plck");
    ok(&["capture", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&traces)]);
    let mut files: Vec<_> = std::fs::read_dir(&traces)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".pltr"))
        .collect();
    files.sort();
    assert_eq!(files, ["en.pltr", "x-l1.pltr", "x-l2.pltr"]);

    // Same inputs, same bytes.
    ok(&["capture", "--ckpt", s(&ckpt), "--data", s(&data), "--out", s(&traces2)]);
    for f in &files {
        assert_eq!(
            std::fs::read(traces.join(f)).unwrap(),
            std::fs::read(traces2.join(f)).unwrap()
        );
    }

    ok(&["analyze", "--traces", s(&traces), "--out", s(&analysis)]);
    let stats = json(&analysis.join("stats.json"));
    assert_eq!(stats["n_layers"], 3);
    assert_eq!(stats["overlap"]["avg"].as_array().unwrap().len(), 3);

    // The toy statistics need not yield a selection; an explicit layer list always works.
    let _ = plast(&["select", "--stats", s(&analysis.join("stats.json")), "--out", s(&analysis)]);
    let train_cfg = root.join("train.json");
    std::fs::write(&train_cfg, r#"{"learning_rate": 0.003, "epochs": 1}"#).unwrap();
    ok(&[
        "train", "--ckpt", s(&ckpt), "--data", s(&data), "--layers", "1,2", "--config",
        s(&train_cfg), "--out", s(&trained),
    ]);
    let report = json(&trained.join("train_report.json"));
    assert_eq!(report["steps"], 3);
    assert_eq!(report["frozen_checksums_before"], report["frozen_checksums_after"]);

    ok(&["lens", "--ckpt", s(&trained.join("model.plck")), "--data", s(&data), "--out", s(&lens_out)]);
    let grid = json(&lens_out.join("lens.json"));
    assert_eq!(grid["n_layers"], 3);
    let attn = json(&lens_out.join("attn.json"));
    for l in attn["layers"].as_array().unwrap() {
        let m = l["vision_mass"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&m));
    }
}

#[test]
fn zero_epoch_training_keeps_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("spec.json");
    std::fs::write(&cfg, r#"{"n_pretrain": 4, "n_train": 8, "n_eval": 2, "n_monitor": 2}"#).unwrap();
    let data = root.join("data");
    ok(&["gen", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["init", "--data", s(&data), "--out", s(&root.join("init"))]);
    let ckpt = root.join("init/model.plck");
    let train_cfg = root.join("train.json");
    std::fs::write(&train_cfg, r#"{"epochs": 0}"#).unwrap();
    let sel = root.join("selection.json");
    std::fs::write(
        &sel,
        r#"{"boundary_layer": 3, "K": [1, 2], "msd": {"1": 0.2, "2": 0.1}, "theta": 0.15, "selected": [1]}"#,
    )
    .unwrap();
    ok(&[
        "train", "--ckpt", s(&ckpt), "--data", s(&data), "--selection", s(&sel), "--config",
        s(&train_cfg), "--out", s(&root.join("out")),
    ]);
    assert_eq!(
        std::fs::read(&ckpt).unwrap(),
        std::fs::read(root.join("out/model.plck")).unwrap()
    );
    let resolved = json(&root.join("out/resolved_config.json"));
    assert_eq!(resolved["config"]["selected_layers"], serde_json::json!([1]));
}
