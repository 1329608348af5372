mod common;

use std::path::Path;
use std::process::{Command, Output};

use salgpode::harness::{METRICS_HEADER, SUMMARY_HEADER};

fn salgpode(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salgpode")).args(args).output().unwrap()
}

fn write_config(dir: &Path, budget: usize) -> String {
    let mut cfg = common::tiny_config(budget);
    cfg.seeds = vec![0, 1];
    cfg.output_dir = dir.join("runs");
    let path = dir.join("experiment.toml");
    std::fs::write(&path, toml::to_string(&cfg).unwrap()).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn lists_registered_systems() {
    let out = salgpode(&["list-systems"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["vdp", "vdp-squared", "lotka-volterra"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{name}\t"))), "{text}");
    }
}

#[test]
fn run_evaluate_and_aggregate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    for method in ["sal", "random"] {
        let out = salgpode(&["run", "--config", &cfg, "--method", method]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let runs = dir.path().join("runs");
    let csv = std::fs::read_to_string(runs.join("vdp-sal-entropy/seed-1/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some(METRICS_HEADER));
    assert_eq!(csv.lines().count(), 3);

    let ckpt = runs.join("vdp-random/seed-0/checkpoint.json");
    let out = salgpode(&["evaluate", "--checkpoint", ckpt.to_str().unwrap(), "--config", &cfg]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["system"], "vdp");
    assert!(v["nll"].as_f64().unwrap().is_finite());
    assert!((0.0..=1.0).contains(&v["f1"].as_f64().unwrap()));

    let summary = dir.path().join("summary.csv");
    let out = salgpode(&["aggregate", "--input", runs.to_str().unwrap(), "--output", summary.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(&summary).unwrap();
    assert_eq!(text.lines().next(), Some(SUMMARY_HEADER));
    assert_eq!(text.lines().count(), 1 + 2 * 2);

    let out = salgpode(&["run", "--config", &cfg, "--method", "sal", "--resume"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn configuration_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "system = \"vdp\"\nbudgett = 3\n").unwrap();
    assert_eq!(salgpode(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    std::fs::write(&bad, "system = \"pendulum\"\n").unwrap();
    assert_eq!(salgpode(&["run", "--config", bad.to_str().unwrap()]).status.code(), Some(2));

    let cfg = write_config(dir.path(), 1);
    assert_eq!(salgpode(&["run", "--config", &cfg, "--acquisition", "variance"]).status.code(), Some(2));
}

#[test]
fn malformed_metrics_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("empty.csv"), "").unwrap();
    let out = dir.path().join("summary.csv");
    let code = salgpode(&["aggregate", "--input", dir.path().to_str().unwrap(), "--output", out.to_str().unwrap()])
        .status
        .code();
    assert_eq!(code, Some(2));

    std::fs::write(dir.path().join("empty.csv"), "seed,budget\n0,1\n").unwrap();
    let code = salgpode(&["aggregate", "--input", dir.path().to_str().unwrap(), "--output", out.to_str().unwrap()])
        .status
        .code();
    assert_eq!(code, Some(2));

    let ck = dir.path().join("ck.json");
    std::fs::write(&ck, "{\"schema_version\": 99}").unwrap();
    assert_eq!(salgpode(&["evaluate", "--checkpoint", ck.to_str().unwrap()]).status.code(), Some(2));
}
