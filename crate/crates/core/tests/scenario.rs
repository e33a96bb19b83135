use std::fs;
use std::process::Command;

use agentbed::scenario::{run_scenario, ScenarioConfig, ScenarioError, ABORT_MARKER, METRICS_FILE, REPORT_FILE};

fn config(extra_epos: &str, out: &std::path::Path) -> ScenarioConfig {
    let text = format!(
        "seed = 4\noutput_dir = {:?}\n\n[epos]\nagents = 8\nplans = 3\nhorizon = \"reduced:8\"\niterations = 5\n{extra_epos}\n",
        out.display().to_string()
    );
    ScenarioConfig::parse(&text, "test.toml").unwrap()
}

#[test]
fn missing_plan_file_aborts_with_marker() {
    let dir = tempfile::tempdir().unwrap();
    let plans = dir.path().join("plans");
    fs::create_dir(&plans).unwrap();
    let out = dir.path().join("out");
    let cfg = config(&format!("plan_dir = {:?}", plans.display().to_string()), &out);
    let err = run_scenario(&cfg).unwrap_err();
    assert!(matches!(err, ScenarioError::MissingFile(_)), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(out.join(ABORT_MARKER).exists());
}

#[test]
fn same_seed_same_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let a = run_scenario(&config("", &dir.path().join("a"))).unwrap();
    let b = run_scenario(&config("", &dir.path().join("b"))).unwrap();
    assert!(a.dir.join(REPORT_FILE).exists());
    assert_eq!(fs::read(a.dir.join(METRICS_FILE)).unwrap(), fs::read(b.dir.join(METRICS_FILE)).unwrap());
}

#[test]
fn cli_reports_missing_config_with_exit_code_2() {
    let status = Command::new(env!("CARGO_BIN_EXE_agentbed")).args(["--config", "/nonexistent/agentbed.toml"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2));
}
