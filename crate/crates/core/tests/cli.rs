mod common;

use common::scenario_dir;
use std::process::{Command, Output};

fn iotsec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iotsec"))
        .args(args)
        .output()
        .unwrap()
}

fn scenario_arg(name: &str) -> String {
    scenario_dir().join(format!("{name}.json")).display().to_string()
}

#[test]
fn clean_run_exits_zero() {
    let out = iotsec(&["run", "--scenario", &scenario_arg("impersonation")]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["security_violation"], false);
    assert!(out.stderr.is_empty());
}

#[test]
fn violation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario_arg("impersonation")).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
    // the attacker also spoofs the victim's hardware address
    v["adversary"]["actions"][0]["action"]["mac"] = "02:00:00:00:00:0a".into();
    let path = dir.path().join("spoofed.json");
    std::fs::write(&path, v.to_string()).unwrap();
    let report = dir.path().join("report.json");
    let out = iotsec(&[
        "run",
        "--scenario",
        path.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("SECURITY VIOLATION"));
}

#[test]
fn usage_and_config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.json");
    let out = iotsec(&["run", "--scenario", missing.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());

    let bad = dir.path().join("bad.json");
    std::fs::write(
        &bad,
        r#"{"schema": 1, "curve": "T17", "topology": {"devices": [{"id": "d", "gateway": "gw-9"}]}}"#,
    )
    .unwrap();
    let out = iotsec(&["run", "--scenario", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("topology.devices[0].gateway"));

    assert_eq!(iotsec(&["run"]).status.code(), Some(2));
    assert_eq!(iotsec(&["keysize-table", "--verbose"]).status.code(), Some(2));
    assert_eq!(
        iotsec(&["demo-handshake", "--curve", "P384"]).status.code(),
        Some(2)
    );
    assert_eq!(iotsec(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn repeated_runs_write_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let paths: Vec<_> = (0..2)
        .map(|i| {
            (
                dir.path().join(format!("r{i}.json")),
                dir.path().join(format!("l{i}.jsonl")),
            )
        })
        .collect();
    for (report, log) in &paths {
        let out = iotsec(&[
            "run",
            "--scenario",
            &scenario_arg("honest"),
            "--seed",
            "42",
            "--report",
            report.to_str().unwrap(),
            "--log",
            log.to_str().unwrap(),
        ]);
        assert_eq!(out.status.code(), Some(0));
    }
    let read = |p: &std::path::Path| std::fs::read(p).unwrap();
    assert_eq!(read(&paths[0].0), read(&paths[1].0));
    assert_eq!(read(&paths[0].1), read(&paths[1].1));
    let log = String::from_utf8(read(&paths[0].1)).unwrap();
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["epoch"].is_u64() && v["event"].is_string());
    }
}

#[test]
fn keysize_table_and_demo() {
    let out = iotsec(&["keysize-table"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 6);
    let out = iotsec(&["demo-handshake", "--curve", "P256"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("handshake on P256"));
    assert_eq!(text.lines().filter(|l| l.starts_with("flight")).count(), 6);
    assert_eq!(iotsec(&["version"]).status.code(), Some(0));
}
