//! Runs the binary end to end on a small synthetic corpus.

use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn jointrank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_jointrank")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = jointrank(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_record(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap();
    serde_json::from_str(line).unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_runs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, vocab) = (d.join("data.jsonl"), d.join("vocab.txt"));
    ok(&["synth", "--out", s(&data), "--n-queries", "12", "--n-items", "4", "--vocab-size", "120", "--seed", "3"]);
    ok(&["build-vocab", "--data", s(&data), "--out", s(&vocab), "--max-size", "200"]);

    let stats = ok(&["stats", "--data", s(&data), "--vocab", s(&vocab), "--out-dir", s(&d.join("stats"))]);
    assert!(stats.starts_with("L,m,N_u,ratio,skipped_queries\n"));
    assert!(read_json(&d.join("stats/stats.json"))["ratio"].as_f64().unwrap() >= 1.0);

    let train = |out: &str| {
        ok(&[
            "train", "--data", s(&data), "--vocab", s(&vocab), "--out-dir", out, "--steps", "5", "--layers", "1",
            "--d-model", "8", "--heads", "2", "--ff-dim", "16", "--max-positions", "32", "--loss", "listnet",
        ]);
    };
    let (t1, t2) = (d.join("t1"), d.join("t2"));
    train(s(&t1));
    train(s(&t2));
    let ck1 = std::fs::read(t1.join("checkpoint.json")).unwrap();
    assert_eq!(ck1, std::fs::read(t2.join("checkpoint.json")).unwrap());
    let log = std::fs::read_to_string(t1.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert_eq!(read_json(&t1.join("config.json"))["loss"], "listnet");

    let ck = t1.join("checkpoint.json");
    let e1 = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out-dir", s(&d.join("e1")), "--pointwise"]);
    let e2 = ok(&["eval", "--checkpoint", s(&ck), "--data", s(&data), "--out-dir", s(&d.join("e2")), "--pointwise"]);
    assert_eq!(e1, e2);
    assert!(e1.lines().nth(1).unwrap().starts_with("joint,12,"));
    assert!(e1.lines().nth(2).unwrap().starts_with("pointwise,12,"));
    let records = std::fs::read_to_string(d.join("e1/records.jsonl")).unwrap();
    assert_eq!(records.lines().count(), 24);

    ok(&["bench", "--checkpoint", s(&ck), "--data", s(&data), "--out-dir", s(&d.join("b"))]);
    let bench = read_json(&d.join("b/bench.json"));
    let m = &bench["measured"];
    assert!(m["joint_flops"].as_u64().unwrap() <= m["pointwise_flops"].as_u64().unwrap());
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, vocab, cfg) = (d.join("data.jsonl"), d.join("vocab.txt"), d.join("cfg.json"));
    ok(&["synth", "--out", s(&data), "--n-queries", "4", "--n-items", "3", "--vocab-size", "60"]);
    ok(&["build-vocab", "--data", s(&data), "--out", s(&vocab)]);
    std::fs::write(
        &cfg,
        r#"{"loss":"ce","steps":2,"encoder":{"layers":1,"d_model":8,"heads":2,"ff_dim":8,"max_positions":24,"vocab_size":5}}"#,
    )
    .unwrap();
    let out = d.join("t");
    ok(&["train", "--data", s(&data), "--vocab", s(&vocab), "--out-dir", s(&out), "--config", s(&cfg), "--steps", "3"]);
    let c = read_json(&out.join("config.json"));
    assert_eq!(c["loss"], "ce");
    assert_eq!(c["steps"], 3);
    assert_eq!(c["encoder"]["d_model"], 8);
}

#[test]
fn cost_prints_the_analytic_ratio() {
    let out = ok(&["cost", "--l-q", "1", "--l-k", "1", "--n", "100", "--c", "11"]);
    let row: Vec<f64> = out.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!((row[7] - 400.0 / 101.826_446_280_991_74).abs() < 1e-9);
}

#[test]
fn failures_emit_an_error_record() {
    let rec = error_record(&jointrank(&["cost", "--l-q", "1", "--l-k", "1", "--n", "4", "--c", "0.5"]));
    assert_eq!(rec["error"], "invalid");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"query\":\"a\",\"items\":[\"b\",\"c\",\"d\"],\"labels\":[0.1,0.2]}\n").unwrap();
    let rec = error_record(&jointrank(&["build-vocab", "--data", s(&bad), "--out", s(&dir.path().join("v"))]));
    assert_eq!(rec["error"], "bad_line");
    assert!(rec["message"].as_str().unwrap().contains("line 1"));

    let rec = error_record(&jointrank(&["stats", "--data", "/nonexistent", "--vocab", "/nonexistent", "--out-dir", "x"]));
    assert_eq!(rec["error"], "io");
}
