//! Batch front end behind the `teams` binary.
//!
//! A run is described by a JSON [`RunConfig`]. [`run`] executes it, writes
//! plot-ready CSV and JSON-lines artifacts into the output directory and
//! returns a [`RunReport`] whose manifest carries a SHA-256 per artifact.
//! Every number written depends only on the config and the code version.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::builtin;
use crate::error::{Result, TeamsError};
use crate::fbsde::{hamiltonian_report, mp_improve};
use crate::numerics::Estimate;
use crate::pbp::{solve_team, Certificate, MonteCarloTeam, SolveOptions, SolveTrace};
use crate::policy::{Basis, PolicyProfile};
use crate::problem::{validate, TeamProblem, ValidationReport};
use crate::reduction::RegressionSpec;
use crate::witsenhausen::{
    wits_affine_baseline, wits_bruteforce, wits_fixed_point, wits_payoff, CoarseGrid, StagePolicies, WitsenhausenSpec,
};

/// Config schema version understood by this build.
pub const CONFIG_VERSION: u32 = 1;

/// Where the problem comes from. Files are resolved relative to the config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSource {
    Builtin(String),
    File(PathBuf),
    Inline(Box<TeamProblem>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySource {
    File(PathBuf),
    Inline(PolicyProfile),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverConfig {
    /// Monte Carlo payoff of the initial profile.
    Evaluate,
    /// Person-by-person sweeps until the residual is below `tol`.
    Pbp {
        #[serde(default)]
        restarts: usize,
        /// Cap for doubling the path count when sweeps stall.
        #[serde(default)]
        max_paths: Option<usize>,
    },
    /// Maximum-principle improvement for `budget` steps.
    Mp,
    /// Fixed point of the two-stage benchmark, with the affine and brute-force
    /// comparisons. Needs no `problem`.
    Witsenhausen {
        spec: WitsenhausenSpec,
        #[serde(default)]
        coarse: Option<CoarseGrid>,
    },
}

impl SolverConfig {
    fn name(&self) -> &'static str {
        match self {
            SolverConfig::Evaluate => "evaluate",
            SolverConfig::Pbp { .. } => "pbp",
            SolverConfig::Mp => "mp",
            SolverConfig::Witsenhausen { .. } => "witsenhausen",
        }
    }
}

fn default_n_paths() -> usize {
    2000
}

fn default_dt() -> f64 {
    1e-2
}

fn default_regression() -> RegressionSpec {
    RegressionSpec::polynomial(2)
}

fn default_budget() -> usize {
    20
}

fn default_tol() -> f64 {
    1e-3
}

fn default_out() -> PathBuf {
    PathBuf::from("teams-out")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub problem: Option<ProblemSource>,
    /// Initial profile; defaults to the built-in profile or zero affine policies.
    #[serde(default)]
    pub policy: Option<PolicySource>,
    pub solver: SolverConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_n_paths")]
    pub n_paths: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_regression")]
    pub regression: RegressionSpec,
    /// Sweeps, steps or fixed-point iterations.
    #[serde(default = "default_budget")]
    pub budget: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

fn config_err(e: impl std::fmt::Display) -> TeamsError {
    TeamsError::Config(e.to_string())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(config_err)?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == CONFIG_VERSION as u64 => {}
            Some(v) => return Err(config_err(format!("unsupported config version {v}, expected {CONFIG_VERSION}"))),
            None => return Err(config_err("missing field `version`")),
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(config_err)?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(config_err("`tol` must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(config_err("`dt` must be positive"));
        }
        if self.n_paths < 2 {
            return Err(config_err("`n_paths` must be at least 2"));
        }
        self.regression.check().map_err(config_err)?;
        match &self.solver {
            SolverConfig::Witsenhausen { spec, coarse } => {
                spec.check().map_err(config_err)?;
                if let Some(c) = coarse {
                    crate::witsenhausen::CoarseProblem::new(spec, c).map_err(config_err)?;
                }
            }
            _ if self.problem.is_none() => return Err(config_err("missing field `problem`")),
            SolverConfig::Pbp { max_paths: Some(m), .. } if *m < self.n_paths => {
                return Err(config_err("`max_paths` must be at least `n_paths`"))
            }
            _ => {}
        }
        Ok(())
    }

    /// Resolves the problem and the initial profile.
    pub fn resolve(&self, base: &Path) -> Result<(TeamProblem, PolicyProfile)> {
        let source = self.problem.as_ref().ok_or_else(|| config_err("missing field `problem`"))?;
        let (problem, default_profile) = match source {
            ProblemSource::Builtin(name) => {
                let (p, prof) = builtin::by_name(name)?;
                (p, Some(prof))
            }
            ProblemSource::File(p) => (read_json::<TeamProblem>(&base.join(p))?, None),
            ProblemSource::Inline(p) => ((**p).clone(), None),
        };
        problem.check_shapes().map_err(config_err)?;
        let profile = match &self.policy {
            None => default_profile
                .unwrap_or_else(|| PolicyProfile::zeros(&problem, Basis::Polynomial { degree: 1 }, 1, vec![])),
            Some(PolicySource::File(p)) => read_json(&base.join(p))?,
            Some(PolicySource::Inline(p)) => p.clone(),
        };
        profile.check(&problem).map_err(config_err)?;
        Ok((problem, profile))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Comparison of the Witsenhausen fixed point with its baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitsenhausenSummary {
    pub zero_payoff: f64,
    pub affine: (f64, f64),
    pub affine_payoff: f64,
    pub fixed_point_payoff: f64,
    pub converged: bool,
    pub iterations: usize,
    pub stage1_residual: f64,
    pub stage2_residual: f64,
    /// `zero ≥ affine ≥ fixed point − 10⁻⁶`.
    pub dominance_chain: bool,
    pub brute_force_payoff: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub config: RunConfig,
    pub version: String,
    pub solver: String,
    pub wall_time_s: f64,
    pub payoff: Estimate,
    pub max_residual: Option<f64>,
    pub certificate: Option<Certificate>,
    pub witsenhausen: Option<WitsenhausenSummary>,
    pub manifest: Vec<ManifestEntry>,
}

pub fn version_string() -> String {
    format!("teams {}", env!("CARGO_PKG_VERSION"))
}

/// Collects artifacts in memory and writes them with their hashes.
struct Artifacts {
    dir: PathBuf,
    manifest: Vec<ManifestEntry>,
}

impl Artifacts {
    fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| TeamsError::Io(format!("{}: {e}", dir.display())))?;
        Ok(Artifacts { dir: dir.to_path_buf(), manifest: Vec::new() })
    }

    fn write(&mut self, name: &str, bytes: Vec<u8>) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, &bytes).map_err(|e| TeamsError::Io(format!("{}: {e}", path.display())))?;
        self.manifest.push(ManifestEntry {
            file: name.to_string(),
            sha256: hex::encode(Sha256::digest(&bytes)),
            bytes: bytes.len() as u64,
        });
        Ok(())
    }

    fn trace(&mut self, trace: &SolveTrace) -> Result<()> {
        let mut csv = Vec::new();
        trace.write_csv(&mut csv)?;
        self.write("trace.csv", csv)?;
        let mut jl = Vec::new();
        trace.write_json_lines(&mut jl)?;
        self.write("trace.jsonl", jl)
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| TeamsError::Io(e.to_string()))?;
        bytes.push(b'\n');
        self.write(name, bytes)
    }
}

/// Hex SHA-256 of a file's contents.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| TeamsError::Io(format!("{}: {e}", path.display())))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Executes the configured pipeline. Relative problem and policy files are
/// resolved against `base`; artifacts go to `config.out`.
pub fn run(config: &RunConfig, base: &Path) -> Result<RunReport> {
    config.check()?;
    let start = Instant::now();
    let mut art = Artifacts::new(&config.out)?;
    let mut report = RunReport {
        config: config.clone(),
        version: version_string(),
        solver: config.solver.name().into(),
        wall_time_s: 0.0,
        payoff: Estimate { value: f64::NAN, stderr: f64::NAN },
        max_residual: None,
        certificate: None,
        witsenhausen: None,
        manifest: Vec::new(),
    };
    match &config.solver {
        SolverConfig::Witsenhausen { spec, coarse } => run_witsenhausen(config, spec, coarse.as_ref(), &mut art, &mut report)?,
        solver => {
            let (problem, init) = config.resolve(base)?;
            let mut team = MonteCarloTeam::new(&problem, config.regression.clone(), config.n_paths, config.seed);
            team.dt = config.dt;
            match solver {
                SolverConfig::Evaluate => {
                    report.payoff = team.evaluate(&init, config.seed)?;
                    let mut csv = String::from("payoff,stderr,n_paths\n");
                    writeln!(csv, "{:e},{:e},{}", report.payoff.value, report.payoff.stderr, config.n_paths).unwrap();
                    art.write("payoff.csv", csv.into_bytes())?;
                }
                SolverConfig::Pbp { restarts, max_paths } => {
                    team.max_paths = max_paths.unwrap_or(config.n_paths);
                    let opts = SolveOptions { budget: config.budget, tol: config.tol, restarts: *restarts, seed: config.seed };
                    let out = solve_team(&mut team, &init, &opts)?;
                    report.payoff = out.payoff;
                    report.max_residual = Some(out.max_residual);
                    report.certificate = Some(out.certificate);
                    art.trace(&out.trace)?;
                    art.json("policy.json", &out.profile)?;
                }
                SolverConfig::Mp => {
                    let (profile, trace) =
                        mp_improve(&problem, &init, config.budget, &config.regression, config.n_paths, config.seed, config.dt)?;
                    let eval_seed = crate::pbp::sweep_seed(config.seed, config.budget);
                    report.payoff = team.evaluate(&profile, eval_seed)?;
                    let ham = hamiltonian_report(&problem, &profile, &config.regression, config.n_paths, eval_seed, config.dt)?;
                    report.max_residual = Some(ham.max_residual);
                    art.trace(&trace)?;
                    let mut csv = Vec::new();
                    ham.write_csv(&mut csv)?;
                    art.write("residual.csv", csv)?;
                    art.json("policy.json", &profile)?;
                }
                SolverConfig::Witsenhausen { .. } => unreachable!(),
            }
        }
    }
    report.manifest = art.manifest;
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn run_witsenhausen(
    config: &RunConfig,
    spec: &WitsenhausenSpec,
    coarse: Option<&CoarseGrid>,
    art: &mut Artifacts,
    report: &mut RunReport,
) -> Result<()> {
    let zero_payoff = wits_payoff(spec, &StagePolicies::zero(spec))?;
    let ((a, b), affine_payoff) = wits_affine_baseline(spec)?;
    let fp = wits_fixed_point(spec, &StagePolicies::affine(spec, a, b), config.budget, config.tol)?;
    let fixed_point_payoff = wits_payoff(spec, &fp.policies)?;
    let last = fp.trace.last();
    let brute_force_payoff = match coarse {
        Some(c) => Some(wits_bruteforce(spec, &CoarseGrid { seed: config.seed, ..c.clone() })?.payoff),
        None => None,
    };

    let mut trace = String::from("iteration,stage1_residual,stage2_residual,change,payoff\n");
    let mut jl = String::new();
    for r in &fp.trace {
        writeln!(trace, "{},{:e},{:e},{:e},{:e}", r.iteration, r.stage1, r.stage2, r.change, r.payoff).unwrap();
        jl.push_str(&serde_json::to_string(r).map_err(|e| TeamsError::Io(e.to_string()))?);
        jl.push('\n');
    }
    art.write("trace.csv", trace.into_bytes())?;
    art.write("trace.jsonl", jl.into_bytes())?;
    for (name, grid, values) in
        [("gamma1.csv", spec.x_grid(), &fp.policies.gamma1), ("gamma2.csv", spec.y_grid(), &fp.policies.gamma2)]
    {
        let mut csv = String::from("grid_point,gamma\n");
        for (g, v) in grid.iter().zip(values) {
            writeln!(csv, "{g:e},{v:e}").unwrap();
        }
        art.write(name, csv.into_bytes())?;
    }

    let summary = WitsenhausenSummary {
        zero_payoff,
        affine: (a, b),
        affine_payoff,
        fixed_point_payoff,
        converged: fp.converged,
        iterations: fp.trace.len(),
        stage1_residual: last.map_or(f64::NAN, |r| r.stage1),
        stage2_residual: last.map_or(f64::NAN, |r| r.stage2),
        dominance_chain: zero_payoff >= affine_payoff && affine_payoff >= fixed_point_payoff - 1e-6,
        brute_force_payoff,
    };
    report.payoff = Estimate { value: fixed_point_payoff, stderr: 0.0 };
    report.max_residual = Some(summary.stage1_residual.max(summary.stage2_residual));
    report.witsenhausen = Some(summary);
    Ok(())
}

/// Checks a config and its problem without solving.
pub fn validate_config(config: &RunConfig, base: &Path) -> Result<Option<ValidationReport>> {
    config.check()?;
    if matches!(config.solver, SolverConfig::Witsenhausen { .. }) && config.problem.is_none() {
        return Ok(None);
    }
    let (problem, _) = config.resolve(base)?;
    validate(&problem).map(Some).map_err(config_err)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Human,
    Csv,
    JsonLines,
}

impl std::str::FromStr for ReportFormat {
    type Err = TeamsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "human" => Ok(ReportFormat::Human),
            "csv" => Ok(ReportFormat::Csv),
            "json-lines" => Ok(ReportFormat::JsonLines),
            other => Err(config_err(format!("unknown report format `{other}`"))),
        }
    }
}

fn summary_rows(report: &RunReport) -> Vec<(String, String)> {
    let mut rows = vec![
        ("version".to_string(), report.version.clone()),
        ("solver".to_string(), report.solver.clone()),
        ("seed".to_string(), report.config.seed.to_string()),
        ("wall_time_s".to_string(), format!("{:.3}", report.wall_time_s)),
        ("payoff".to_string(), format!("{:e}", report.payoff.value)),
        ("stderr".to_string(), format!("{:e}", report.payoff.stderr)),
    ];
    if let Some(r) = report.max_residual {
        rows.push(("max_residual".into(), format!("{r:e}")));
    }
    if let Some(c) = report.certificate {
        rows.push(("certificate".into(), serde_json::to_value(c).unwrap().as_str().unwrap_or_default().to_string()));
    }
    if let Some(w) = &report.witsenhausen {
        rows.push(("zero_payoff".into(), format!("{:e}", w.zero_payoff)));
        rows.push(("affine_payoff".into(), format!("{:e}", w.affine_payoff)));
        rows.push(("converged".into(), w.converged.to_string()));
        rows.push(("dominance_chain".into(), if w.dominance_chain { "pass" } else { "fail" }.into()));
        if let Some(b) = w.brute_force_payoff {
            rows.push(("brute_force_payoff".into(), format!("{b:e}")));
        }
    }
    for m in &report.manifest {
        rows.push((format!("sha256:{}", m.file), m.sha256.clone()));
    }
    rows
}

/// Renders the report: an aligned table, `key,value` CSV, or one JSON record.
pub fn emit_report(report: &RunReport, format: ReportFormat, mut w: impl Write) -> Result<()> {
    match format {
        ReportFormat::Human => {
            let rows = summary_rows(report);
            let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
            for (k, v) in rows {
                writeln!(w, "{k:<width$}  {v}")?;
            }
        }
        ReportFormat::Csv => {
            let mut wtr = csv::Writer::from_writer(w);
            wtr.write_record(["key", "value"]).map_err(|e| TeamsError::Io(e.to_string()))?;
            for (k, v) in summary_rows(report) {
                wtr.write_record([k, v]).map_err(|e| TeamsError::Io(e.to_string()))?;
            }
            wtr.flush()?;
        }
        ReportFormat::JsonLines => {
            serde_json::to_writer(&mut w, report).map_err(|e| TeamsError::Io(e.to_string()))?;
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Process exit code for an error: 2 for configuration problems, 3 otherwise.
pub fn exit_code(err: &TeamsError) -> i32 {
    match err {
        TeamsError::Config(_) => 2,
        _ => 3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn deterministic_config(out: &Path) -> String {
        format!(
            r#"{{
  "version": 1,
  "problem": {{"inline": {{
    "flavor": {{"kind": "continuous_time", "horizon": 1.0, "noise_dim": 1,
                "diffusion": {{"family": "constant", "s": [[0.0]]}}}},
    "state_dim": 1,
    "drift": {{"family": "zero", "dim": 1}},
    "dms": [{{"action": {{"dim": 1, "set": {{"kind": "box", "lower": [-1.0], "upper": [1.0]}}}},
              "observation": {{"family": "zero", "dim": 1}},
              "noise_scale": [[1.0]],
              "information": {{"kind": "own_history"}}}}],
    "running_cost": {{"family": "constant", "value": 0.0}},
    "terminal_cost": {{"family": "quadratic", "gx": [1.0], "c": 0.0}},
    "initial": {{"kind": "point", "x": [2.0]}}
  }}}},
  "solver": {{"kind": "evaluate"}},
  "n_paths": 16,
  "dt": 0.1,
  "out": {:?}
}}"#,
            out
        )
    }

    #[test]
    fn deterministic_problem_evaluates_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::from_json(&deterministic_config(dir.path())).unwrap();
        let report = run(&cfg, dir.path()).unwrap();
        assert_eq!(report.payoff.value, 2.0);
        assert_eq!(report.payoff.stderr, 0.0);
        for m in &report.manifest {
            assert_eq!(file_sha256(&dir.path().join(&m.file)).unwrap(), m.sha256);
        }
    }

    #[test]
    fn unknown_fields_and_versions_are_config_errors() {
        let base = r#"{"version": 1, "problem": {"builtin": "radner"}, "solver": {"kind": "evaluate"}"#;
        assert!(RunConfig::from_json(&format!("{base}}}")).is_ok());
        for bad in [
            format!("{base}, \"colour\": 1}}"),
            r#"{"version": 9, "solver": {"kind": "evaluate"}}"#.to_string(),
            r#"{"solver": {"kind": "evaluate"}}"#.to_string(),
            format!("{base}, \"tol\": 0}}"),
            r#"{"version": 1, "solver": {"kind": "evaluate"}}"#.to_string(),
            r#"{"version": 1, "problem": {"builtin": "radner"}, "solver": {"kind": "newton"}}"#.to_string(),
        ] {
            let err = RunConfig::from_json(&bad).unwrap_err();
            assert_eq!(exit_code(&err), 2, "{bad}: {err}");
        }
        let unknown = RunConfig::from_json(r#"{"version": 1, "problem": {"builtin": "x"}, "solver": {"kind": "evaluate"}}"#).unwrap();
        assert_eq!(exit_code(&unknown.resolve(Path::new(".")).unwrap_err()), 2);
    }

    #[test]
    fn large_k_witsenhausen_passes_dominance_chain() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            r#"{{"version": 1, "solver": {{"kind": "witsenhausen", "spec": {{"k": 1000.0, "sigma0": 1.0, "sigmav": 1.0, "nodes": 100}}}},
                "budget": 50, "tol": 1e-8, "out": {:?}}}"#,
            dir.path()
        );
        let report = run(&RunConfig::from_json(&text).unwrap(), dir.path()).unwrap();
        assert!(report.witsenhausen.as_ref().unwrap().dominance_chain);
        let names: Vec<_> = report.manifest.iter().map(|m| m.file.as_str()).collect();
        assert_eq!(names, ["trace.csv", "trace.jsonl", "gamma1.csv", "gamma2.csv"]);
    }

    #[test]
    fn reruns_write_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mk = |sub: &str| {
            format!(
                r#"{{"version": 1, "problem": {{"builtin": "radner"}}, "solver": {{"kind": "pbp"}},
                    "n_paths": 400, "budget": 2, "out": {:?}}}"#,
                dir.path().join(sub)
            )
        };
        let a = run(&RunConfig::from_json(&mk("a")).unwrap(), dir.path()).unwrap();
        let b = run(&RunConfig::from_json(&mk("b")).unwrap(), dir.path()).unwrap();
        assert_eq!(a.manifest, b.manifest);
        assert!(!a.manifest.is_empty());
    }

    #[test]
    fn report_formats_render() {
        let dir = tempfile::tempdir().unwrap();
        let report = run(&RunConfig::from_json(&deterministic_config(dir.path())).unwrap(), dir.path()).unwrap();
        let mut human = Vec::new();
        emit_report(&report, ReportFormat::Human, &mut human).unwrap();
        assert!(String::from_utf8(human).unwrap().contains("payoff "));
        let mut csv = Vec::new();
        emit_report(&report, ReportFormat::Csv, &mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().starts_with("key,value\n"));
        let mut jl = Vec::new();
        emit_report(&report, ReportFormat::JsonLines, &mut jl).unwrap();
        let back: RunReport = serde_json::from_slice(&jl).unwrap();
        assert_eq!(back.payoff, report.payoff);
    }
}
