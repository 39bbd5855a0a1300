use std::fs;
use std::path::Path;
use std::process::Command as Process;

use clap::Parser;
use polyrnn::data::{load_instances, SynthConfig};
use polyrnn::model::{ModelConfig, TrainConfig};
use polyrnn_cli::{run, Cli, Command, RunConfig, METRICS_HEADER};

fn parse(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("polyrnn").chain(args.iter().copied())).unwrap()
}

fn tiny_config(dir: &Path, epochs: usize) -> std::path::PathBuf {
    let cfg = RunConfig {
        model: ModelConfig::tiny(),
        train: TrainConfig {
            epochs,
            ..TrainConfig::default()
        },
        synth: SynthConfig {
            image_size: 96,
            min_object: 40.0,
            max_object: 80.0,
            ..SynthConfig::default()
        },
        ..RunConfig::default()
    };
    let p = dir.join("config.json");
    fs::write(&p, cfg.to_json()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_defaults_to_one_through_four() {
    let cli = parse(&["simulate", "--checkpoint", "c", "--data", "d", "--out", "o"]);
    let Command::Simulate(a) = cli.command else { panic!() };
    let shown: Vec<String> = a.thresholds.iter().map(|t| t.to_string()).collect();
    assert_eq!(shown, ["1", "2", "3", "4"]);
    let cli = parse(&["eval", "--data", "d", "--out", "o", "--thresholds", "2,inf"]);
    let Command::Eval(a) = cli.command else { panic!() };
    assert_eq!(a.thresholds.len(), 2);
    assert!(Cli::try_parse_from(["polyrnn", "eval", "--data", "d", "--out", "o", "--thresholds", "x"]).is_err());
}

#[test]
fn config_rejects_unknown_keys_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"epochs": 3, "learning_rate": 0.1}}"#).unwrap();
    assert!(RunConfig::load(&bad).is_err());
    fs::write(&bad, r#"{"trian": {}}"#).unwrap();
    assert!(RunConfig::load(&bad).is_err());

    let good = dir.path().join("good.json");
    fs::write(&good, r#"{"train": {"epochs": 3, "lr": 0.5}, "train_data": "a.json"}"#).unwrap();
    let cli = parse(&["train", "--config", s(&good), "--out", "o", "--lr", "0.25"]);
    let Command::Train(a) = cli.command else { panic!() };
    let cfg = polyrnn_cli::resolve_train_config(&a).unwrap();
    assert_eq!(cfg.train.lr, 0.25);
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.batch_size, TrainConfig::default().batch_size);
    assert_eq!(cfg.train_data.as_deref(), Some(dir.path().join("a.json").as_path()));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = tiny_config(d, 2);
    let data = d.join("data/train.json");
    run(parse(&["synth", "--seed", "4", "--n", "12", "--out", s(&data), "--config", s(&cfg)])).unwrap();
    assert_eq!(load_instances(&data).unwrap().len(), 12);

    let out = d.join("run");
    run(parse(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&out)])).unwrap();
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert!(lines[1].ends_with(summary["config_sha256"].as_str().unwrap()));
    assert_eq!(summary["checkpoint_sha256"].as_str().unwrap().len(), 64);

    // Same config and seed again: identical metrics.
    let again = d.join("again");
    run(parse(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&again)])).unwrap();
    assert_eq!(metrics, fs::read_to_string(again.join("metrics.csv")).unwrap());
    assert_eq!(fs::read(out.join("checkpoint.bin")).unwrap(), fs::read(again.join("checkpoint.bin")).unwrap());

    let ckpt = out.join("checkpoint.bin");
    let preds = d.join("preds.json");
    run(parse(&["predict", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&preds)])).unwrap();
    let p: serde_json::Value = serde_json::from_str(&fs::read_to_string(&preds).unwrap()).unwrap();
    assert_eq!(p["checkpoint_sha256"], summary["checkpoint_sha256"]);
    let n = p["predictions"].as_array().unwrap().len() + p["skipped"].as_array().unwrap().len();
    assert_eq!(n, 12);
    for q in p["predictions"].as_array().unwrap() {
        assert!(q["polygon"].as_array().unwrap().len() >= 3);
    }

    let report = d.join("report");
    run(parse(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&report), "--thresholds", "1,2"])).unwrap();
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["metadata"]["checkpoint_sha256"], summary["checkpoint_sha256"]);
    assert!(fs::read_to_string(report.join("per-instance.csv")).unwrap().starts_with("instance_id,class,iou"));

    let baseline = d.join("baseline");
    run(parse(&["eval", "--data", s(&data), "--out", s(&baseline)])).unwrap();
    let b: serde_json::Value = serde_json::from_str(&fs::read_to_string(baseline.join("report.json")).unwrap()).unwrap();
    let methods: Vec<&str> = b["rows"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["squarebox"]);

    let curve = d.join("curve.csv");
    run(parse(&["--sequential", "simulate", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&curve)])).unwrap();
    let text = fs::read_to_string(&curve).unwrap();
    assert_eq!(text.lines().count(), 5);
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("curve.json")).unwrap()).unwrap();
    assert_eq!(meta["checkpoint_sha256"], summary["checkpoint_sha256"]);
}

#[test]
fn binary_exits_nonzero_on_bad_input() {
    let exe = env!("CARGO_BIN_EXE_polyrnn");
    let out = Process::new(exe)
        .args(["eval", "--data", "/nonexistent/x.json", "--out", "/tmp/never"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let out = Process::new(exe).args(["synth", "--n", "0", "--out", "/tmp/never.json"]).output().unwrap();
    assert!(!out.status.success());
    let out = Process::new(exe).arg("--help").output().unwrap();
    assert!(out.status.success());
}
