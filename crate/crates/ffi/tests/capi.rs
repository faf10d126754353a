use std::ffi::{CStr, CString};
use std::ptr;

use teams_ffi::*;

fn take_string(p: *mut std::ffi::c_char) -> String {
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { teams_string_free(p) };
    s
}

fn last_error() -> Option<String> {
    let p = teams_last_error_message();
    (!p.is_null()).then(|| take_string(p))
}

#[test]
fn builtin_problem_round_trip() {
    let name = CString::new("radner").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { teams_problem_builtin(name.as_ptr(), &mut handle) }, TeamsStatus::Ok);
    assert!(last_error().is_none());
    assert_eq!(unsafe { teams_problem_dm_count(handle) }, 2);

    let mut json = ptr::null_mut();
    assert_eq!(unsafe { teams_problem_default_policy(handle, &mut json) }, TeamsStatus::Ok);
    let policy = CString::new(take_string(json)).unwrap();

    let (mut v1, mut s1, mut v2, mut s2) = (0.0, 0.0, 0.0, 0.0);
    assert_eq!(unsafe { teams_evaluate(handle, ptr::null(), 500, 4, 0.01, &mut v1, &mut s1) }, TeamsStatus::Ok);
    assert_eq!(unsafe { teams_evaluate(handle, policy.as_ptr(), 500, 4, 0.01, &mut v2, &mut s2) }, TeamsStatus::Ok);
    assert_eq!((v1, s1), (v2, s2));
    assert!(v1.is_finite() && s1 > 0.0);
    unsafe { teams_problem_free(handle) };
}

#[test]
fn errors_carry_status_and_message() {
    let name = CString::new("no_such_problem").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { teams_problem_builtin(name.as_ptr(), &mut handle) }, TeamsStatus::Config);
    assert!(handle.is_null());
    assert!(last_error().unwrap().contains("no_such_problem"));

    assert_eq!(unsafe { teams_problem_builtin(ptr::null(), &mut handle) }, TeamsStatus::NullPointer);
    let bad = CString::new("{\"state_dim\": 1}").unwrap();
    assert_eq!(unsafe { teams_problem_from_json(bad.as_ptr(), &mut handle) }, TeamsStatus::Config);

    let name = CString::new("lq_scalar").unwrap();
    assert_eq!(unsafe { teams_problem_builtin(name.as_ptr(), &mut handle) }, TeamsStatus::Ok);
    let wrong = CString::new("{\"per_dm\": []}").unwrap();
    let (mut v, mut s) = (0.0, 0.0);
    assert_eq!(unsafe { teams_evaluate(handle, wrong.as_ptr(), 100, 0, 0.01, &mut v, &mut s) }, TeamsStatus::Config);
    assert_eq!(unsafe { teams_evaluate(handle, ptr::null(), 100, 0, 0.01, ptr::null_mut(), &mut s) }, TeamsStatus::NullPointer);
    unsafe { teams_problem_free(handle) };
    unsafe { teams_problem_free(ptr::null_mut()) };
    unsafe { teams_string_free(ptr::null_mut()) };
}

#[test]
fn run_returns_report_json() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"{{"version": 1, "solver": {{"kind": "witsenhausen", "spec": {{"k": 0.5, "sigma0": 1.0, "sigmav": 1.0, "nodes": 80}}}}, "out": {:?}}}"#,
        dir.path()
    );
    let cfg = CString::new(cfg).unwrap();
    let mut report = ptr::null_mut();
    assert_eq!(unsafe { teams_run(cfg.as_ptr(), ptr::null(), &mut report) }, TeamsStatus::Ok);
    let report: serde_json::Value = serde_json::from_str(&take_string(report)).unwrap();
    assert_eq!(report["solver"], "witsenhausen");
    assert_eq!(report["manifest"].as_array().unwrap().len(), 4);
}

#[test]
fn version_is_static() {
    let v = unsafe { CStr::from_ptr(teams_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

/// Compiles a C program against the generated header and the static library.
#[test]
fn c_program_links_against_header() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if std::process::Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("no C compiler found; skipping");
        return;
    }
    let manifest = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libteams_ffi.a");
    assert!(lib.exists(), "{} missing", lib.display());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"#include <stdio.h>
#include "teams.h"
int main(void) {
    TeamsProblem *p = NULL;
    if (teams_problem_builtin("tanh_filter_discrete", &p) != TeamsStatus_Ok) return 1;
    double v = 0.0, s = 0.0;
    if (teams_evaluate(p, NULL, 200, 1, 0.01, &v, &s) != TeamsStatus_Ok) return 2;
    teams_problem_free(p);
    if (teams_problem_builtin("bogus", &p) != TeamsStatus_Config) return 3;
    char *msg = teams_last_error_message();
    if (msg == NULL) return 4;
    teams_string_free(msg);
    printf("%.6f %.6f\n", v, s);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("main");
    let status = std::process::Command::new(&cc)
        .arg(&src)
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success());
    let out = std::process::Command::new(&bin).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status);
    let text = String::from_utf8(out.stdout).unwrap();
    let nums: Vec<f64> = text.split_whitespace().map(|t| t.parse().unwrap()).collect();
    assert!(nums[0].is_finite() && nums[1] > 0.0);
}
