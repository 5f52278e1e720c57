use splitran::sim::MetricsReport;
use std::path::Path;
use std::process::Command;

fn splitran(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_splitran")).args(args).output().unwrap()
}

fn small_config(dir: &Path) -> String {
    let p = dir.join("cfg.json");
    std::fs::write(&p, r#"{"desk_scale": 0.1, "duration_tti": 400, "warmup_tti": 100, "traffic": {"cells": 3}}"#).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn run_then_report_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("out");
    let o = splitran(&["run", "--config", &cfg, "--cores", "2", "--out", out.to_str().unwrap(), "--log"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: MetricsReport = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert!(out.join("metrics.csv").exists());

    let again = dir.path().join("again");
    let o = splitran(&["report", "--log", out.join("events.jsonl").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let recomputed: MetricsReport = serde_json::from_str(&std::fs::read_to_string(again.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, recomputed);
    assert_eq!(summary.cores, 2);
}

#[test]
fn bad_input_reports_json_error() {
    let o = splitran(&["run", "--strategy", "nope", "--duration-tti", "10"]);
    assert_eq!(o.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&o.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].as_str().unwrap().contains("nope"));

    let dir = tempfile::tempdir().unwrap();
    let o = splitran(&["report", "--log", dir.path().join("missing.jsonl").to_str().unwrap()]);
    assert!(!o.status.success());

    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{not json\n").unwrap();
    let o = splitran(&["report", "--log", bad.to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn sweep_writes_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("sweep");
    let o = splitran(&[
        "sweep",
        "--config",
        &cfg,
        "--cores-list",
        "1,2",
        "--bw-list",
        "10",
        "--strategies",
        "hades,baseline",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x == "csv"))
        .unwrap();
    let rows = std::fs::read_to_string(csv).unwrap().lines().count();
    assert_eq!(rows, 1 + 4);
}
