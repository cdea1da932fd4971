use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

use magprompt::backbone::BackboneCheckpoint;
use magprompt::graph::load_dataset;
use magprompt::prompt::PromptState;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_magprompt"))
}

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().unwrap()
}

fn ok(args: &[&str], out: &Path) -> Output {
    let o = run(args, out);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 2] = ["--sbm-per-block", "20"];

fn pretrained(dir: &Path) -> PathBuf {
    let out = dir.join("pre");
    ok(
        &[
            &["pretrain"][..],
            &SMALL,
            &["--dims", "8,16,16", "--pretrain-epochs", "15"],
        ]
        .concat(),
        &out,
    );
    out.join("backbone.ckpt")
}

#[test]
fn pretrain_writes_a_reloadable_deterministic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let toy = fixture("toy_node");
    let args = [
        "pretrain",
        "--dataset",
        s(&toy),
        "--dims",
        "3,8,8",
        "--pretrain-epochs",
        "10",
        "--seeds",
        "4",
    ];
    ok(&args, &dir.path().join("a"));
    ok(&args, &dir.path().join("b"));
    let a = dir.path().join("a/backbone.ckpt");
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(bytes, std::fs::read(dir.path().join("b/backbone.ckpt")).unwrap());

    let loaded = BackboneCheckpoint::<f64>::load(&a).unwrap();
    assert_eq!(loaded.dims, vec![3, 8, 8]);
    let again = dir.path().join("again.ckpt");
    loaded.save(&again).unwrap();
    assert_eq!(std::fs::read(again).unwrap(), bytes);

    let curve = std::fs::read_to_string(dir.path().join("a/pretrain_loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 11);
    assert!(curve.starts_with("epoch,loss\n"));
    let config = json(&dir.path().join("a/config.json"));
    assert_eq!(config["seeds"], serde_json::json!([4]));
}

#[test]
fn missing_dataset_exits_with_status_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["pretrain", "--dataset", "/definitely/not/here"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("/definitely/not/here"), "{err}");
}

#[test]
fn tune_summarizes_seeds_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let out = dir.path().join("tune");
    let args = [
        &["tune"][..],
        &SMALL,
        &["--checkpoint", s(&ckpt), "--epochs", "12", "--seeds", "0,1,2"],
    ]
    .concat();
    let o = ok(&args, &out);
    assert!(String::from_utf8_lossy(&o.stdout).contains("over 3 seeds"));

    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["variant"], "mag_plus");
    assert_eq!(summary["per_seed"].as_array().unwrap().len(), 3);
    for key in ["mean", "std"] {
        assert!(summary["test"][key].is_number());
    }
    let mean: f64 = summary["per_seed"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["test"].as_f64().unwrap())
        .sum::<f64>()
        / 3.0;
    assert!((summary["test"]["mean"].as_f64().unwrap() - mean).abs() < 1e-12);

    let metrics = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 36);
    let first: Value = serde_json::from_str(metrics.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 0);
    assert_eq!(first["pc_loss"].as_array().unwrap().len(), 2);

    let usage = std::fs::read_to_string(out.join("usage.csv")).unwrap();
    assert_eq!(usage.lines().next(), Some("seed,epoch,layer,component,usage"));
    // 3 seeds x 12 epochs x 2 layers x 10 components.
    assert_eq!(usage.lines().count(), 1 + 3 * 12 * 2 * 10);

    for seed in 0..3 {
        let (state, extra) = PromptState::<f64>::load(out.join(format!("prompt_seed{seed}.ckpt"))).unwrap();
        assert_eq!(state.num_layers(), 2);
        let names: Vec<&str> = extra.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["head.weight", "head.bias"]);
    }

    // Feeding the written config back reproduces the summary byte for byte.
    let replay = dir.path().join("replay");
    ok(&["tune", "--config", s(&out.join("config.json"))], &replay);
    assert_eq!(
        std::fs::read(out.join("summary.json")).unwrap(),
        std::fs::read(replay.join("summary.json")).unwrap()
    );
}

#[test]
fn lambda_with_mag_is_rejected_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never");
    let o = run(
        &[
            "tune",
            "--variant",
            "mag",
            "--lambda-pc",
            "0.1",
            "--checkpoint",
            "x.ckpt",
        ],
        &out,
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lambda_pc"));
    assert!(!out.exists());
}

#[test]
fn dimension_mismatch_names_both_dims() {
    let dir = tempfile::tempdir().unwrap();
    let toy_ckpt = dir.path().join("toy");
    ok(
        &[
            "pretrain",
            "--dataset",
            s(&fixture("toy_node")),
            "--dims",
            "3,4,4",
            "--pretrain-epochs",
            "2",
        ],
        &toy_ckpt,
    );
    let o = run(
        &[
            "tune",
            "--checkpoint",
            s(&toy_ckpt.join("backbone.ckpt")),
            "--epochs",
            "2",
        ],
        &dir.path().join("t"),
    );
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains('8') && err.contains('3'), "{err}");
}

#[test]
fn unknown_config_key_and_bad_flag_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"learning_rate": 0.1}"#).unwrap();
    assert_eq!(run(&["synth", "--config", s(&cfg)], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["synth", "--beta", "lots"], dir.path()).status.code(), Some(2));
    assert_eq!(run(&["synth", "--sbm-p-in", "1.5"], dir.path()).status.code(), Some(2));
}

#[test]
fn ablate_emits_four_rows_matching_linear_probe() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let common = [
        &SMALL[..],
        &["--checkpoint", s(&ckpt), "--epochs", "10", "--seeds", "3,5"],
    ]
    .concat();
    let abl = dir.path().join("abl");
    ok(&[&["ablate"][..], &common].concat(), &abl);
    let csv = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "rw,ep,seeds,mean,std");
    assert_eq!(lines.len(), 5);
    let cells: Vec<Vec<&str>> = lines[1..].iter().map(|l| l.split(',').collect()).collect();
    let flags: Vec<(&str, &str)> = cells.iter().map(|c| (c[0], c[1])).collect();
    assert_eq!(
        flags,
        [
            ("false", "false"),
            ("true", "false"),
            ("false", "true"),
            ("true", "true")
        ]
    );
    assert!(cells.iter().all(|c| c[2] == "2"));

    let lp = dir.path().join("lp");
    ok(&[&["tune", "--variant", "linear_probe"][..], &common].concat(), &lp);
    let tuned = json(&lp.join("summary.json"));
    let rows = json(&abl.join("summary.json"));
    assert_eq!(rows["rows"][0]["mean"], tuned["test"]["mean"]);
    assert_eq!(rows["rows"][0]["std"], tuned["test"]["std"]);
    assert!(lp.join("head_seed3.ckpt").exists());
}

#[test]
fn verify_passes_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let o = ok(&["verify"], &dir.path().join("v"));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().any(|l| l.starts_with("PASS equivariance")), "{text}");
    let report = json(&dir.path().join("v/summary.json"));
    let eq = report["properties"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["name"] == "equivariance")
        .unwrap();
    assert!(eq["max_error"].as_f64().unwrap() < 1e-9);

    let bad = run(&["verify", "--corrupt-softmax"], &dir.path().join("bad"));
    assert_eq!(bad.status.code(), Some(1));
    let err = String::from_utf8_lossy(&bad.stderr);
    assert!(err.contains("segment_oracles"), "{err}");
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sbm");
    ok(
        &[
            "synth",
            "--sbm-blocks",
            "3",
            "--sbm-per-block",
            "10",
            "--sbm-feature-dim",
            "4",
        ],
        &out,
    );
    let data = load_dataset::<f64>(&out).unwrap();
    assert_eq!(data.graphs[0].num_nodes(), 30);
    assert_eq!(data.meta.num_classes, 3);
    let summary = json(&out.join("summary.json"));
    assert_eq!(
        summary["num_edges"].as_u64().unwrap() as usize,
        data.graphs[0].num_edges()
    );
}

#[test]
fn graph_task_reports_auc() {
    let dir = tempfile::tempdir().unwrap();
    let toy = fixture("toy_graph");
    ok(
        &[
            "pretrain",
            "--dataset",
            s(&toy),
            "--arch",
            "gin",
            "--dims",
            "2,8,8",
            "--pretrain-epochs",
            "5",
        ],
        &dir.path().join("pre"),
    );
    ok(
        &[
            "tune",
            "--dataset",
            s(&toy),
            "--checkpoint",
            s(&dir.path().join("pre/backbone.ckpt")),
            "--k-shots",
            "2",
            "--epochs",
            "5",
            "--seeds",
            "0",
            "--batch-size",
            "2",
            "--variant",
            "mag",
        ],
        &dir.path().join("t"),
    );
    let summary = json(&dir.path().join("t/summary.json"));
    assert_eq!(summary["metric"], "roc_auc");
    assert!(!dir.path().join("t/usage.csv").exists());
}
