// SPDX-License-Identifier: Apache-2.0

//! The `virtine-bench` binary: exit statuses and CSV round trips.

use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_virtine-bench"))
}

#[test]
fn missing_hardware_exits_3() {
    let out = bench()
        .args(["creation-ladder", "--trials", "2", "--backend", "hw"])
        .env("VIRTINE_KVM_DEVICE", "/nonexistent/kvm")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn mock_run_summary_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ladder.csv");
    let svg = dir.path().join("ladder.svg");
    let out = bench()
        .args(["creation-ladder", "--trials", "8", "--backend", "mock", "--strict", "--csv"])
        .arg(&csv)
        .arg("--plot")
        .arg(&svg)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("== creation-ladder-mock (cycles)"), "{stdout}");
    assert!(stdout.contains("PASS"), "{stdout}");
    assert!(std::fs::read_to_string(&svg).unwrap().starts_with("<svg"));

    let summary = bench().arg("summary").arg("--csv").arg(&csv).output().unwrap();
    assert!(summary.status.success());
    let text = String::from_utf8_lossy(&summary.stdout);
    for v in ["function", "bare-run-resume", "process-spawn-exec"] {
        assert!(text.contains(v), "{v} missing from {text}");
    }

    let again = dir.path().join("again.svg");
    let plot = bench().arg("plot").arg("--csv").arg(&csv).arg("--out").arg(&again).output().unwrap();
    assert!(plot.status.success(), "{}", String::from_utf8_lossy(&plot.stderr));
    assert!(again.exists());
    let bad = bench()
        .arg("plot")
        .arg("--csv")
        .arg(&csv)
        .arg("--out")
        .arg(&again)
        .args(["--experiment", "nope"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn missing_csv_is_an_error() {
    let out = bench().args(["summary", "--csv", "/nonexistent.csv"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
