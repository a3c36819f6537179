//! Runs the `gipip` binary on small synthetic configs.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const BASE: &str = r#"
[experiment]
seed = 3
parallel_runs = 2

[data]
dataset = "synthetic"
synthetic_train = 40
synthetic_test = 20
image_size = 12
num_targets = 4
batch_size = 4

[model]
arch = "mlp2"

[prior]
epochs = 3
batch_size = 10

[attack]
iterations = 10
record_every = 5

[ablation]
weights = [0.0, 1e-4, 1e-3]
seeds = [0, 1]
"#;

fn gipip(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("config.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_gipip"))
        .arg("--config")
        .arg(&cfg)
        .arg("--output")
        .arg(dir.join("out"))
        .args(args)
        .output()
        .unwrap()
}

fn lines(p: &Path) -> Vec<String> {
    fs::read_to_string(p).unwrap().lines().map(String::from).collect()
}

#[test]
fn train_attack_ablate_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");

    let r = gipip(tmp.path(), BASE, &["train-prior"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(lines(&out.join("prior_trace.csv")).len(), 3 + 1);

    let r = gipip(tmp.path(), BASE, &["attack"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let results = lines(&out.join("results.csv"));
    assert_eq!(results.len(), 1 + 1, "four targets in one batch of four");
    assert!(!results[0].contains("wall_time"));
    assert!(fs::read_to_string(out.join("manifest.txt")).unwrap().contains("wall_time"));

    let r = gipip(tmp.path(), BASE, &["ablate-as"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(lines(&out.join("ablation.csv")).len(), 1 + 3 * 2 + 3);

    let r = gipip(tmp.path(), BASE, &["evaluate"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(out.join("evaluation.csv").exists());
}

#[test]
fn ig_rows_report_zero_anomaly_weight() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("iterations = 10", "iterations = 10\nmethod = \"ig\"");
    let r = gipip(tmp.path(), &cfg, &["attack"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let rows = lines(&tmp.path().join("out/results.csv"));
    let k = rows[0].split(',').position(|h| h == "lambda_as").unwrap();
    assert_eq!(rows[1].split(',').nth(k).unwrap(), "0");
}

#[test]
fn unknown_config_key_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("[model]", "[model]\nwidth = 3");
    let r = gipip(tmp.path(), &cfg, &["attack"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("width"));
}

#[test]
fn partial_batch_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = BASE.replace("num_targets = 4", "num_targets = 5");
    assert_eq!(gipip(tmp.path(), &cfg, &["attack"]).status.code(), Some(2));
}

#[test]
fn corrupt_model_file_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let r = gipip(tmp.path(), BASE, &["train-prior"]);
    assert!(r.status.success());
    let model = fs::read_dir(tmp.path().join("out"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|e| e == "gipip"))
        .unwrap();
    let mut bytes = fs::read(&model).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&model, bytes).unwrap();
    assert_eq!(gipip(tmp.path(), BASE, &["attack"]).status.code(), Some(3));
}
