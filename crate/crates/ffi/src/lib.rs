//! C ABI over the `teams` solver library.
//!
//! Every fallible function returns a [`TeamsStatus`]. On failure the message is
//! kept per thread and can be fetched with [`teams_last_error_message`].
//! Strings handed out by this library must be released with
//! [`teams_string_free`], problem handles with [`teams_problem_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use teams::cli::{run, RunConfig};
use teams::pbp::MonteCarloTeam;
use teams::policy::{Basis, PolicyProfile};
use teams::problem::TeamProblem;
use teams::reduction::RegressionSpec;
use teams::TeamsError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TeamsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed JSON, unknown names, inconsistent shapes.
    Config = 3,
    /// A solver or simulation failed.
    Solver = 4,
    Io = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// A problem together with its default policy profile.
pub struct TeamsProblem {
    problem: TeamProblem,
    profile: PolicyProfile,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Failure(TeamsStatus, String);

impl From<TeamsError> for Failure {
    fn from(e: TeamsError) -> Self {
        let status = match &e {
            TeamsError::Config(_) | TeamsError::MalformedProblem(_) | TeamsError::ShapeMismatch(_) => TeamsStatus::Config,
            TeamsError::Io(_) => TeamsStatus::Io,
            _ => TeamsStatus::Solver,
        };
        Failure(status, e.to_string())
    }
}

fn guarded(f: impl FnOnce() -> Result<(), Failure>) -> TeamsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => TeamsStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            TeamsStatus::Panic
        }
    }
}

/// # Safety
/// `s` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(s: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if s.is_null() {
        return Err(Failure(TeamsStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(s).to_str().map_err(|_| Failure(TeamsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn null_check<T>(p: *const T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        Err(Failure(TeamsStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s).map(CString::into_raw).map_err(|_| Failure(TeamsStatus::Io, "string contains NUL".into()))
}

fn json_err(e: serde_json::Error) -> Failure {
    Failure(TeamsStatus::Config, e.to_string())
}

/// Message of the last failed call on this thread as a new string, or null if
/// the last call succeeded. Free with [`teams_string_free`].
#[no_mangle]
pub extern "C" fn teams_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |m| m.clone().into_raw()))
}

/// # Safety
/// `s` must be null or a string returned by this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn teams_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn teams_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn boxed(problem: TeamProblem, profile: Option<PolicyProfile>) -> Result<*mut TeamsProblem, Failure> {
    problem.check_shapes()?;
    let profile = profile.unwrap_or_else(|| PolicyProfile::zeros(&problem, Basis::Polynomial { degree: 1 }, 1, vec![]));
    profile.check(&problem)?;
    Ok(Box::into_raw(Box::new(TeamsProblem { problem, profile })))
}

/// Looks up a built-in problem by name.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn teams_problem_builtin(name: *const c_char, out: *mut *mut TeamsProblem) -> TeamsStatus {
    guarded(|| {
        null_check(out, "out")?;
        let (problem, profile) = teams::builtin::by_name(read_str(name, "name")?)?;
        *out = boxed(problem, Some(profile))?;
        Ok(())
    })
}

/// Parses a problem from JSON; its default profile is zero affine policies.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn teams_problem_from_json(json: *const c_char, out: *mut *mut TeamsProblem) -> TeamsStatus {
    guarded(|| {
        null_check(out, "out")?;
        let problem: TeamProblem = serde_json::from_str(read_str(json, "json")?).map_err(json_err)?;
        *out = boxed(problem, None)?;
        Ok(())
    })
}

/// # Safety
/// `problem` must be null or a handle from this library that was not freed yet.
#[no_mangle]
pub unsafe extern "C" fn teams_problem_free(problem: *mut TeamsProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Number of decision makers, or 0 for a null handle.
///
/// # Safety
/// `problem` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn teams_problem_dm_count(problem: *const TeamsProblem) -> usize {
    problem.as_ref().map_or(0, |p| p.problem.dm_count())
}

/// The problem's default profile as JSON. Free with [`teams_string_free`].
///
/// # Safety
/// `problem` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn teams_problem_default_policy(problem: *const TeamsProblem, out: *mut *mut c_char) -> TeamsStatus {
    guarded(|| {
        null_check(problem, "problem")?;
        null_check(out, "out")?;
        let json = serde_json::to_string(&(*problem).profile).map_err(json_err)?;
        *out = into_c_string(json)?;
        Ok(())
    })
}

/// Monte Carlo payoff of a profile under the original measure.
///
/// `policy_json` may be null to use the problem's default profile; `dt` is the
/// continuous-time step and is ignored for discrete-time problems.
///
/// # Safety
/// `problem` must be a live handle, `policy_json` null or a NUL-terminated
/// string, `out_value` and `out_stderr` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn teams_evaluate(
    problem: *const TeamsProblem,
    policy_json: *const c_char,
    n_paths: usize,
    seed: u64,
    dt: f64,
    out_value: *mut f64,
    out_stderr: *mut f64,
) -> TeamsStatus {
    guarded(|| {
        null_check(problem, "problem")?;
        null_check(out_value, "out_value")?;
        null_check(out_stderr, "out_stderr")?;
        let handle = &*problem;
        let profile = if policy_json.is_null() {
            handle.profile.clone()
        } else {
            let p: PolicyProfile = serde_json::from_str(read_str(policy_json, "policy_json")?).map_err(json_err)?;
            p.check(&handle.problem).map_err(|e| Failure(TeamsStatus::Config, e.to_string()))?;
            p
        };
        if n_paths < 2 || !(dt > 0.0) {
            return Err(Failure(TeamsStatus::Config, "n_paths must be at least 2 and dt positive".into()));
        }
        let mut team = MonteCarloTeam::new(&handle.problem, RegressionSpec::polynomial(1), n_paths, seed);
        team.dt = dt;
        let est = team.evaluate(&profile, seed)?;
        *out_value = est.value;
        *out_stderr = est.stderr;
        Ok(())
    })
}

/// Runs a JSON run config, writing its artifacts, and returns the report as
/// JSON. Relative paths in the config are resolved against `base_dir`, or the
/// current directory when it is null. Free the report with [`teams_string_free`].
///
/// # Safety
/// `config_json` must be a NUL-terminated string, `base_dir` null or a
/// NUL-terminated string, and `report_json` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn teams_run(
    config_json: *const c_char,
    base_dir: *const c_char,
    report_json: *mut *mut c_char,
) -> TeamsStatus {
    guarded(|| {
        null_check(report_json, "report_json")?;
        let cfg = RunConfig::from_json(read_str(config_json, "config_json")?)?;
        let base = if base_dir.is_null() { PathBuf::from(".") } else { PathBuf::from(read_str(base_dir, "base_dir")?) };
        let report = run(&cfg, &base)?;
        *report_json = into_c_string(serde_json::to_string(&report).map_err(json_err)?)?;
        Ok(())
    })
}
