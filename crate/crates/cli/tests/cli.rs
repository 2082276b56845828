use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ofms(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ofms")).args(args).output().expect("binary runs")
}

fn example_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.json")
}

/// The example config shortened so tests stay quick.
fn short_config(dir: &Path, horizon: u64) -> PathBuf {
    let text = std::fs::read_to_string(example_config()).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    v["horizon"] = horizon.into();
    v["output_dir"] = serde_json::Value::Null;
    let path = dir.join("config.json");
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn run_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(dir.path(), 40);
    let out = dir.path().join("artifacts");
    let o = ofms(&["run", "--config", config.to_str().unwrap(), "--seed", "3", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("round,client,model,loss,chosen,stored\n"));
    assert_eq!(trace.lines().count(), 1 + 40 * 5 * 10);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics["seed"], 3);
    assert_eq!(metrics["memory_violations"], 0);
    assert_eq!(metrics["bandwidth_violations"], 0);
    assert!(out.join("checkpoint.json").exists());
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(dir.path(), 30);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(ofms(&["run", "--config", config.to_str().unwrap(), "--out", a.to_str().unwrap()]).status.success());
    assert!(ofms(&["run", "--config", config.to_str().unwrap(), "--out", b.to_str().unwrap(), "--serial"])
        .status
        .success());
    assert_eq!(std::fs::read(a.join("trace.csv")).unwrap(), std::fs::read(b.join("trace.csv")).unwrap());
}

#[test]
fn sweep_prints_one_point_per_budget() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(dir.path(), 30);
    let o = ofms(&["sweep", "--config", config.to_str().unwrap(), "--seeds", "0..2", "--budgets", "2,5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let points: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let points = points.as_array().unwrap();
    assert_eq!(points.len(), 2);
    assert_eq!(points[0]["seeds"], serde_json::json!([0, 1]));
    assert_eq!(points[1]["budget"], 5.0);
}

#[test]
fn bounds_reports_tuned_rates() {
    let o = ofms(&["bounds", "--config", example_config().to_str().unwrap()]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(report["alpha"], 2);
    assert_eq!(report["mu"][0], 5);
    assert_eq!(report["client_bound"].as_array().unwrap().len(), 5);
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let config = short_config(dir.path(), 10);
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&config).unwrap()).unwrap();
    v["budgets"] = serde_json::json!([1.5]);
    std::fs::write(&config, v.to_string()).unwrap();
    let o = ofms(&["bounds", "--config", config.to_str().unwrap()]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("budgets[0]"), "{err}");
}

#[test]
fn bad_seed_range_is_rejected() {
    let o = ofms(&["sweep", "--config", example_config().to_str().unwrap(), "--seeds", "5..5"]);
    assert!(!o.status.success());
}
