use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"{
  "dataset": "synthetic",
  "synthetic_per_split": 40,
  "image_size": 8,
  "n_cells": 2,
  "n_nodes": 5,
  "init_channels": 4,
  "epochs": { "pretrain": 1, "prune": 1, "finetune": 1 },
  "batch_size": 16,
  "max_batches_per_epoch": 2,
  "seed": 7
}"#;

fn dass(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dass")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.json");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_exits_1_and_names_path() {
    let o = dass(&["search", "--config", "does/not/exist/missing.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.json"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_exits_1_with_usage() {
    let o = dass(&["search", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("usage"), "{}", stderr(&o));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("typo.json");
    std::fs::write(&p, r#"{ "pruning_ratioo": 0.5 }"#).unwrap();
    let o = dass(&["search", "--config", s(&p)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("pruning_ratioo"), "{}", stderr(&o));
}

#[test]
fn ratio_out_of_range_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = dass(&["search", "--config", s(&cfg), "--ratio", "1.5"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn search_smoke_then_derive_eval_report_and_compare() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = dass(&["search", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in [
        "genotype.json",
        "report.json",
        "config_resolved.json",
        "loss_curves.csv",
        "ckpt_pretrain.ckpt",
        "ckpt_prune.ckpt",
        "ckpt_finetune.ckpt",
    ] {
        assert!(run.join(f).exists(), "{f} missing");
    }

    let derived = dir.path().join("derived.json");
    let o = dass(&["derive", "--checkpoint", s(&run.join("ckpt_prune.ckpt")), "--out", s(&derived)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let g: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&derived).unwrap()).unwrap();
    let written: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("genotype.json")).unwrap()).unwrap();
    assert_eq!(g, written);

    let o = dass(&[
        "eval",
        "--genotype",
        s(&run.join("genotype.json")),
        "--checkpoint",
        s(&run.join("ckpt_finetune.ckpt")),
        "--split",
        "test",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let acc = v["accuracy"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&acc));

    let o = dass(&["report", "--run", s(&run)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("top-1 accuracy"));

    let o = dass(&[
        "compare-features",
        "--a",
        s(&run.join("ckpt_pretrain.ckpt")),
        "--b",
        s(&run.join("ckpt_finetune.ckpt")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout).into_owned();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("cell,tau"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2);
    for r in rows {
        let tau: f64 = r.split(',').nth(1).unwrap().parse().unwrap();
        assert!((-100.0..=100.0).contains(&tau));
    }

    // a rerun from the echoed config reproduces the report bit for bit
    let again = dir.path().join("again");
    let o = dass(&["search", "--config", s(&run.join("config_resolved.json")), "--out", s(&again)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        std::fs::read(run.join("report.json")).unwrap(),
        std::fs::read(again.join("report.json")).unwrap()
    );
}

#[test]
fn truncated_checkpoint_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    let o = dass(&["baseline", "--config", s(&cfg), "--out", s(&run)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let bytes = std::fs::read(run.join("ckpt_prune.ckpt")).unwrap();
    let cut = dir.path().join("cut.ckpt");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    let o = dass(&["finetune", "--checkpoint", s(&cut), "--out", s(&dir.path().join("ft"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!stderr(&o).is_empty());
}

#[test]
fn sweep_csv_has_one_row_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    let o = dass(&["sweep", "--config", s(&cfg), "--ratios", "0.5,0.9", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("sweep.csv")).unwrap();
    let header: Vec<String> = rdr.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["ratio", "accuracy_dass", "accuracy_baseline", "nonzero_params"]);
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][0], "0.5");
    assert_eq!(&rows[1][0], "0.9");
    let nz: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert!(nz[1] < nz[0], "higher ratio keeps fewer weights: {nz:?}");
}
