//! Binary-level checks: subcommands, exit codes, and artifact layout.

use std::path::Path;
use std::process::Command;

fn otpitch() -> Command {
    Command::new(env!("CARGO_BIN_EXE_otpitch"))
}

/// Small config keeping binary-level runs fast.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
  "scenario": "single_run",
  "trials": 2,
  "signal": { "nominals_hz": [200.0, 320.0], "n_samples": 128, "snr_db": 15.0 },
  "grids": { "f_count": 400, "g_count": 61, "pitch_lo_hz": 120.0, "pitch_hi_hz": 420.0 },
  "stochastic": { "max_outer_iters": 80, "max_inner_iters": 150, "inner_tol": 1e-7, "debias_max_iters": 500 },
  "deterministic": { "max_outer_iters": 80, "max_inner_iters": 150, "inner_tol": 1e-7, "debias_max_iters": 500 },
  "master_seed": 7
}"#,
    )
    .unwrap();
    path
}

#[test]
fn simulate_writes_artifacts_and_recovers_pitches() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("run");
    let status = otpitch()
        .args([
            "simulate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--method",
            "both",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    for artifact in [
        "signal.csv",
        "ground_truth.json",
        "estimate_stochastic.json",
        "estimate_deterministic.json",
        "spectrum_stochastic.csv",
        "spectrum_deterministic.csv",
        "outer_objective_deterministic.csv",
        "summary.json",
    ] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let truth = summary["true_f0s_hz"].as_array().unwrap();
    assert_eq!(truth.len(), 2);
    // The deterministic method nails this clean-ish fixture.
    let ger = summary["deterministic"]["ger"].as_f64().unwrap();
    assert!(ger <= 0.5, "summary: {summary}");
}

#[test]
fn sweep_and_emit_plots_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    let status = otpitch()
        .args([
            "sweep-snr",
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--method",
            "det",
            "--trials",
            "2",
            "--jobs",
            "2",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    for artifact in ["results.csv", "results.json", "raw.json", "config.json", "ger_vs_snr.csv"] {
        assert!(out.join(artifact).exists(), "missing {artifact}");
    }
    // Re-emission from persisted results.
    std::fs::remove_file(out.join("ger_vs_snr.csv")).unwrap();
    let status = otpitch()
        .args(["emit-plots", "--out", out.to_str().unwrap()])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("ger_vs_snr.csv").exists());

    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    // 5 SNR points x 2 trials x 1 method + header.
    assert_eq!(csv.lines().count(), 11, "{csv}");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"scenario": "snr_sweep", "unknown_field": 1}"#).unwrap();
    let status = otpitch()
        .args(["sweep-snr", "--config", bad.to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));

    let status = otpitch()
        .args(["simulate", "--method", "banana"])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}

#[test]
fn data_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let status = otpitch()
        .args([
            "estimate-audio",
            dir.path().join("missing.wav").to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));

    // emit-plots with no results in the directory.
    let status = otpitch()
        .args(["emit-plots", "--out", dir.path().to_str().unwrap()])
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(3));
}
