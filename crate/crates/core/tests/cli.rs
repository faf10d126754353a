use std::path::Path;
use std::process::{Command, Output};

fn teams(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_teams"))
        .args(args)
        .current_dir(dir)
        .env_remove("TEAMS_WORKERS")
        .output()
        .expect("spawn teams")
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const EVALUATE: &str = r#"{"version": 1, "problem": {"builtin": "radner"}, "solver": {"kind": "evaluate"}, "n_paths": 200}"#;

#[test]
fn run_writes_artifacts_and_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "eval.json", EVALUATE);
    let out = teams(dir.path(), &["run", "eval.json", "--out", "res", "--seed", "7", "--format", "csv"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("key,value\n"));
    assert!(stdout.contains("seed,7\n"));
    assert!(dir.path().join("res/payoff.csv").is_file());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("res/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 7);
}

#[test]
fn worker_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "eval.json", EVALUATE);
    let csv = |workers: &str, out: &str| {
        let o = teams(dir.path(), &["run", "eval.json", "--out", out, "--workers", workers]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(dir.path().join(out).join("payoff.csv")).unwrap()
    };
    assert_eq!(csv("1", "a"), csv("3", "b"));
}

#[test]
fn validate_accepts_a_good_config() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "eval.json", EVALUATE);
    let out = teams(dir.path(), &["validate", "eval.json"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(!out.stdout.is_empty());
}

#[test]
fn configuration_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "unknown.json", r#"{"version": 1, "problem": {"builtin": "nope"}, "solver": {"kind": "evaluate"}}"#);
    write(dir.path(), "typo.json", r#"{"version": 1, "problem": {"builtin": "radner"}, "solver": {"kind": "evaluate"}, "pahts": 3}"#);
    for args in [
        &["validate", "unknown.json"][..],
        &["run", "unknown.json"],
        &["run", "typo.json"],
        &["run", "absent.json"],
        &["run", "typo.json", "--workers", "0"],
    ] {
        let out = teams(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    }
}

#[test]
fn solver_errors_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    // The maximum-principle engine only handles continuous time.
    write(
        dir.path(),
        "mp.json",
        r#"{"version": 1, "problem": {"builtin": "tanh_filter_discrete"}, "solver": {"kind": "mp"}, "n_paths": 50, "budget": 1}"#,
    );
    let out = teams(dir.path(), &["run", "mp.json", "--out", "mp"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn workers_default_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "eval.json", EVALUATE);
    let out = Command::new(env!("CARGO_BIN_EXE_teams"))
        .args(["run", "eval.json", "--out", "env"])
        .current_dir(dir.path())
        .env("TEAMS_WORKERS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
