use std::fs;
use std::process::{Command, Output};

use hetsched::planner::ExecutionPlan;
use hetsched::profiler::ProfileTable;
use hetsched::simengine::parse_timeline;
use hetsched::HardwareConfig;

fn hetsched(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetsched")).args(args).output().expect("binary runs")
}

fn stdout(args: &[&str]) -> String {
    let out = hetsched(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    for args in [
        &["frobnicate"][..],
        &["solve", "--mode", "warp-drive"],
        &["solve", "--format", "xml"],
        &["explain", "--op", "Softmax"],
        &[],
    ] {
        assert_eq!(hetsched(args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = hetsched(&["--hardware", missing.to_str().unwrap(), "solve"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "not,a,profile\n").unwrap();
    assert_eq!(hetsched(&["--profile", bad.to_str().unwrap(), "solve"]).status.code(), Some(1));

    let hw = dir.path().join("hw.json");
    let mut cfg = HardwareConfig::default();
    cfg.gpu.peak_flops_effective = -1.0;
    fs::write(&hw, serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(hetsched(&["--hardware", hw.to_str().unwrap(), "solve"]).status.code(), Some(1));
}

#[test]
fn profile_csv_loads_back_and_drives_solve() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("profile.csv");
    let text = stdout(&["profile", "--format", "csv", "--out", csv.to_str().unwrap()]);
    assert!(text.is_empty(), "--out should leave stdout empty");
    let table = ProfileTable::from_csv(&fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(table.len(), 70);

    let with_file = stdout(&["--profile", csv.to_str().unwrap(), "solve", "--format", "json"]);
    let builtin = stdout(&["solve", "--format", "json"]);
    assert_eq!(with_file, builtin);
}

#[test]
fn solve_json_is_a_plan() {
    let text = stdout(&["solve", "--phase", "prefill", "--seq-len", "300", "--format", "json"]);
    let plan = ExecutionPlan::from_json(&text).unwrap();
    assert_eq!(plan.seq_len, 300);
    assert_eq!(plan.layers.len(), 32);
}

#[test]
fn formats_differ_in_shape() {
    let args = ["compare", "--phase", "decoding", "--seq-len", "1"];
    let table = stdout(&[&args[..], &["--format", "table"]].concat());
    let csv = stdout(&[&args[..], &["--format", "csv"]].concat());
    let json = stdout(&[&args[..], &["--format", "json"]].concat());
    assert!(table.lines().nth(1).unwrap().starts_with("--"));
    let header = csv.lines().next().unwrap();
    assert!(header.contains(','));
    assert_eq!(csv.lines().count(), 5, "header plus four modes");
    let rows: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
}

#[test]
fn simulate_writes_timeline() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("events.ndjson");
    stdout(&["simulate", "--phase", "decoding", "--seq-len", "1", "--tokens", "2", "--timeline", path.to_str().unwrap()]);
    let events = parse_timeline(&fs::read_to_string(&path).unwrap()).unwrap();
    assert!(!events.is_empty());
    assert!(events.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
}

#[test]
fn explain_lists_candidates() {
    let text = stdout(&["explain", "--phase", "prefill", "--seq-len", "300", "--op", "FfnDown", "--format", "csv"]);
    // Header, GPU-only, padding, activation-centric, and the hybrid grid.
    assert!(text.lines().count() > 5, "{text}");
    assert!(text.contains("Hybrid"));
}
