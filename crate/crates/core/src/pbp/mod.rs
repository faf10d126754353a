//! Person-by-person optimization of strategy profiles.
//!
//! A sweep updates one DM at a time in ascending order with the others held
//! fixed. Regular policies take a damped Newton step on the common-random-number
//! payoff (gradient from the pathwise adjoint, Hessian from finite differences
//! of that gradient, backtracking from α = 1 with up to 20 halvings). Relaxed
//! policies are minimized exactly per information cell on a reference ensemble.

pub mod pathwise;

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeamsError};
use crate::girsanov::payoff_original;
use crate::linalg::Mat;
use crate::numerics::{path_stream, splitmix64, std_normal, Estimate, StreamDomain};
use crate::policy::{Basis, Policy, PolicyProfile, RegularPolicy, RelaxedPolicy};
use crate::problem::{
    nearest_atom, ConvexityDeclaration, DiffusionField, Flavor, ScalarField, TeamProblem, VectorField, PROBE_SEED,
};
use crate::reduction::{csv_err, relaxed_block_update, stationarity_residual, RegressionSpec};
use crate::simulate::{problem_grid, simulate_range, Measure, TimeGrid};

use pathwise::pathwise_gradient;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Certificate {
    /// Stationary and the problem is jointly convex: PbP optimality is team optimality.
    TeamOptimalSufficient,
    /// Stationary, but convexity could not be certified.
    PbPStationaryOnly,
    BudgetExhausted,
}

/// One person-by-person sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub sweep: usize,
    pub payoff: f64,
    pub stderr: f64,
    pub max_residual: f64,
    pub n_paths: usize,
    /// Norm of each DM's parameter change (L1 table change for relaxed policies).
    pub coef_change: Vec<f64>,
    pub line_search_failed: Vec<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveTrace {
    pub dm_count: usize,
    pub records: Vec<SweepRecord>,
}

impl SolveTrace {
    pub fn new(dm_count: usize) -> Self {
        SolveTrace { dm_count, records: Vec::new() }
    }

    /// Appends a record; sweep indices must increase strictly.
    pub fn push(&mut self, r: SweepRecord) -> Result<()> {
        if self.records.last().is_some_and(|last| last.sweep >= r.sweep) {
            return Err(TeamsError::InvalidArgument("sweep indices must increase".into()));
        }
        self.records.push(r);
        Ok(())
    }

    /// Columns `sweep,payoff,stderr,max_residual,n_paths,change_dm0,…`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header: Vec<String> =
            ["sweep", "payoff", "stderr", "max_residual", "n_paths"].iter().map(|s| s.to_string()).collect();
        header.extend((0..self.dm_count).map(|i| format!("change_dm{i}")));
        out.write_record(&header).map_err(csv_err)?;
        for r in &self.records {
            let mut row = vec![
                r.sweep.to_string(),
                format!("{:e}", r.payoff),
                format!("{:e}", r.stderr),
                format!("{:e}", r.max_residual),
                r.n_paths.to_string(),
            ];
            row.extend((0..self.dm_count).map(|i| r.coef_change.get(i).map_or(String::new(), |c| format!("{c:e}"))));
            out.write_record(&row).map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_json_lines(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| TeamsError::Io(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_json_lines(r: impl BufRead, dm_count: usize) -> Result<Self> {
        let mut t = SolveTrace::new(dm_count);
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            t.push(serde_json::from_str(&line).map_err(|e| TeamsError::Io(e.to_string()))?)?;
        }
        Ok(t)
    }
}

/// Anything person-by-person iteration can run on.
pub trait TeamObjective {
    /// One sweep over all DMs starting from `profile`.
    fn sweep(&mut self, profile: &PolicyProfile, index: usize) -> Result<(PolicyProfile, SweepRecord)>;
    fn payoff(&mut self, profile: &PolicyProfile) -> Result<Estimate>;
    fn max_residual(&mut self, profile: &PolicyProfile, seed: u64) -> Result<f64>;
    /// Whether stationarity certifies team optimality.
    fn sufficient(&self) -> bool;
    /// Alternative starting profile number `index`, if the objective offers restarts.
    fn restart(&self, _index: usize, _seed: u64) -> Option<PolicyProfile> {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolveOptions {
    /// Maximum number of sweeps per start.
    pub budget: usize,
    pub tol: f64,
    #[serde(default)]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub profile: PolicyProfile,
    pub trace: SolveTrace,
    pub certificate: Certificate,
    pub payoff: Estimate,
    pub max_residual: f64,
    /// 0 for the given initial profile, `r + 1` for restart `r`.
    pub start: usize,
}

fn run_from(obj: &mut dyn TeamObjective, init: &PolicyProfile, opts: &SolveOptions, start: usize) -> Result<SolveOutcome> {
    let mut trace = SolveTrace::new(init.per_dm.len());
    let mut profile = init.clone();
    let mut converged = false;
    for s in 0..opts.budget {
        let (next, rec) = obj.sweep(&profile, s)?;
        profile = next;
        converged = rec.max_residual <= opts.tol;
        trace.push(rec)?;
        if converged {
            break;
        }
    }
    let (payoff, max_residual) = match trace.records.last() {
        Some(r) => (Estimate { value: r.payoff, stderr: r.stderr }, r.max_residual),
        None => (obj.payoff(&profile)?, obj.max_residual(&profile, opts.seed)?),
    };
    let certificate = match (converged, obj.sufficient()) {
        (false, _) => Certificate::BudgetExhausted,
        (true, true) => Certificate::TeamOptimalSufficient,
        (true, false) => Certificate::PbPStationaryOnly,
    };
    Ok(SolveOutcome { profile, trace, certificate, payoff, max_residual, start })
}

/// Repeats sweeps until the max stationarity residual is at most `tol` or the
/// budget runs out, from `init` and from each offered restart; the run with the
/// lowest final payoff wins (earlier runs win ties).
pub fn solve_team(obj: &mut dyn TeamObjective, init: &PolicyProfile, opts: &SolveOptions) -> Result<SolveOutcome> {
    if !(opts.tol > 0.0) {
        return Err(TeamsError::InvalidArgument("tolerance must be positive".into()));
    }
    let mut best = run_from(obj, init, opts, 0)?;
    for r in 0..opts.restarts {
        let Some(start) = obj.restart(r, opts.seed) else { break };
        let out = run_from(obj, &start, opts, r + 1)?;
        if out.payoff.value < best.payoff.value {
            best = out;
        }
    }
    Ok(best)
}

/// Candidate sufficiency certificate from the declaration or the structure of
/// the named families, then downgraded if a sampled Hessian check finds
/// negative curvature of `ℓ` in `(x, u)` or of `φ` in `x`.
pub fn convexity_certificate(problem: &TeamProblem) -> bool {
    let candidate = match problem.convexity {
        ConvexityDeclaration::Nonconvex => false,
        ConvexityDeclaration::Convex => true,
        ConvexityDeclaration::Auto => structurally_convex(problem),
    };
    candidate && sampled_convexity(problem)
}

fn structurally_convex(problem: &TeamProblem) -> bool {
    let drift = problem.drift.structure();
    let static_team = matches!(problem.flavor, Flavor::DiscreteTime { stages: 1, .. });
    let diffusion_ok = match &problem.flavor {
        Flavor::ContinuousTime { diffusion, .. } => diffusion.is_constant(),
        Flavor::DiscreteTime { .. } => true,
    };
    let costs_ok =
        problem.running_cost.known_convex() == Some(true) && problem.terminal_cost.known_convex() == Some(true);
    // Decision-independent information: nothing a DM reads is moved by actions.
    let obs_action_free = static_team || problem.dms.iter().all(|d| !d.observation.structure().uses_actions);
    let no_signaling = static_team
        || problem.dm_count() == 1
        || !drift.uses_actions
        || problem.dms.iter().all(|d| !d.observation.structure().uses_state && !d.information.reads_state());
    drift.affine && diffusion_ok && costs_ok && obs_action_free && no_signaling
}

const PROBES: u64 = 64;

fn min_eigen(h: &Mat) -> (f64, f64) {
    let mut s = h.to_nalgebra();
    s = (&s + s.transpose()) * 0.5;
    let ev = s.symmetric_eigen().eigenvalues;
    let lo = ev.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ev.iter().map(|v| v.abs()).fold(0.0, f64::max);
    (lo, hi)
}

fn sampled_convexity(problem: &TeamProblem) -> bool {
    let n = problem.state_dim;
    let du = problem.joint_action_dim();
    for k in 0..PROBES {
        let mut rng = path_stream(PROBE_SEED, StreamDomain::Probe, 1000 + k);
        let t = rng.random::<f64>() * problem.horizon();
        let x: Vec<f64> = (0..n).map(|_| 2.0 * std_normal(&mut rng)).collect();
        let mut u = Vec::with_capacity(du);
        for d in &problem.dms {
            let mut ui: Vec<f64> = (0..d.action.dim).map(|_| std_normal(&mut rng)).collect();
            let mut pinned = vec![false; ui.len()];
            d.action.project(&mut ui, &mut pinned);
            u.extend(ui);
        }
        // Hessians by central differences of the gradients.
        let dim = n + du;
        let grad = |v: &[f64], out: &mut [f64]| {
            problem.running_cost.grad_x(t, &v[..n], &v[n..], &mut out[..n]);
            problem.running_cost.grad_u(t, &v[..n], &v[n..], &mut out[n..]);
        };
        let mut v: Vec<f64> = x.iter().chain(&u).copied().collect();
        let mut h = Mat::zeros(dim, dim);
        let (mut gp, mut gm) = (vec![0.0; dim], vec![0.0; dim]);
        for c in 0..dim {
            let step = 1e-4 * (1.0 + v[c].abs());
            let keep = v[c];
            v[c] = keep + step;
            grad(&v, &mut gp);
            v[c] = keep - step;
            grad(&v, &mut gm);
            v[c] = keep;
            for r in 0..dim {
                h[(r, c)] = (gp[r] - gm[r]) / (2.0 * step);
            }
        }
        let (lo, hi) = min_eigen(&h);
        if lo < -1e-6 * (1.0 + hi) {
            log::info!("sampled Hessian of the running cost has eigenvalue {lo:e}; certificate downgraded");
            return false;
        }
        let mut hx = Mat::zeros(n, n);
        let mut xx = x.clone();
        let (mut gp, mut gm) = (vec![0.0; n], vec![0.0; n]);
        for c in 0..n {
            let step = 1e-4 * (1.0 + xx[c].abs());
            let keep = xx[c];
            xx[c] = keep + step;
            problem.terminal_cost.grad_x(problem.horizon(), &xx, &[], &mut gp);
            xx[c] = keep - step;
            problem.terminal_cost.grad_x(problem.horizon(), &xx, &[], &mut gm);
            xx[c] = keep;
            for r in 0..n {
                hx[(r, c)] = (gp[r] - gm[r]) / (2.0 * step);
            }
        }
        let (lo, hi) = min_eigen(&hx);
        if n > 0 && lo < -1e-6 * (1.0 + hi) {
            log::info!("sampled Hessian of the terminal cost has eigenvalue {lo:e}; certificate downgraded");
            return false;
        }
    }
    true
}

/// Monte Carlo person-by-person objective for a [`TeamProblem`].
#[derive(Debug, Clone)]
pub struct MonteCarloTeam<'a> {
    pub problem: &'a TeamProblem,
    pub reg: RegressionSpec,
    pub n_paths: usize,
    /// Cap for the doubling schedule.
    pub max_paths: usize,
    pub seed: u64,
    /// Step of the continuous-time grid.
    pub dt: f64,
    /// Visit DMs in a seeded random order instead of ascending order.
    pub randomized_order: bool,
    certified: bool,
    last_payoff: Option<Estimate>,
}

/// Seed of the common random numbers used throughout sweep `index`.
pub fn sweep_seed(seed: u64, index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(index as u64 + 1))
}

fn residual_seed(seed: u64, index: usize) -> u64 {
    splitmix64(sweep_seed(seed, index) ^ 0x7e5d_0a11_5eed_0001)
}

impl<'a> MonteCarloTeam<'a> {
    pub fn new(problem: &'a TeamProblem, reg: RegressionSpec, n_paths: usize, seed: u64) -> Self {
        MonteCarloTeam {
            problem,
            reg,
            n_paths,
            max_paths: n_paths,
            seed,
            dt: 1e-2,
            randomized_order: false,
            certified: convexity_certificate(problem),
            last_payoff: None,
        }
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        problem_grid(self.problem, self.dt)
    }

    /// Common-random-number payoff estimate.
    pub fn evaluate(&self, profile: &PolicyProfile, seed: u64) -> Result<Estimate> {
        let ens = simulate_range(self.problem, profile, self.grid()?, self.n_paths, seed, Measure::Original, 0)?;
        payoff_original(self.problem, &ens)
    }

    /// One damped Newton step on DM `dm`'s parameters.
    fn newton_block(&self, profile: &PolicyProfile, dm: usize, seed: u64) -> Result<(PolicyProfile, f64, bool)> {
        let Policy::Regular(pol) = &profile.per_dm[dm] else { unreachable!() };
        let grid = self.grid()?;
        let eval_grad = |p: &PolicyProfile| -> Result<(Estimate, Vec<f64>)> {
            let ens = simulate_range(self.problem, p, grid, self.n_paths, seed, Measure::Original, 0)?;
            let j = payoff_original(self.problem, &ens)?;
            let g = pathwise_gradient(self.problem, p, &ens)?;
            Ok((j, g.param_means(dm)))
        };
        let (j0, g) = eval_grad(profile)?;
        let theta0 = pol.params();
        let k = theta0.len();
        if k == 0 || g.iter().all(|v| *v == 0.0) {
            return Ok((profile.clone(), 0.0, false));
        }
        let mut hess = nalgebra::DMatrix::<f64>::zeros(k, k);
        let mut trial = profile.clone();
        for c in 0..k {
            let h = 1e-4 * (1.0 + theta0[c].abs());
            let mut th = theta0.clone();
            th[c] += h;
            set_params(&mut trial, dm, &th);
            let (_, gc) = eval_grad(&trial)?;
            for r in 0..k {
                hess[(r, c)] = (gc[r] - g[r]) / h;
            }
        }
        let sym = (&hess + hess.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let top = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
        let floor = (1e-6 * top).max(1e-12);
        let gv = nalgebra::DVector::from_column_slice(&g);
        let coords = eig.eigenvectors.transpose() * &gv;
        let scaled = nalgebra::DVector::from_iterator(k, coords.iter().zip(eig.eigenvalues.iter()).map(|(c, l)| -c / l.abs().max(floor)));
        let dir = &eig.eigenvectors * scaled;

        let mut alpha = 1.0;
        for _ in 0..=20 {
            let th: Vec<f64> = theta0.iter().zip(dir.iter()).map(|(t, d)| t + alpha * d).collect();
            set_params(&mut trial, dm, &th);
            let j = self.evaluate(&trial, seed)?;
            if j.value < j0.value {
                let change = alpha * dir.norm();
                return Ok((trial, change, false));
            }
            alpha *= 0.5;
        }
        log::debug!("line search failed for DM {dm}");
        Ok((profile.clone(), 0.0, true))
    }

    fn order(&self, index: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.problem.dm_count()).collect();
        if self.randomized_order {
            let mut rng = path_stream(self.seed, StreamDomain::Restart, 1 << 32 | index as u64);
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
        }
        order
    }
}

fn set_params(profile: &mut PolicyProfile, dm: usize, theta: &[f64]) {
    if let Policy::Regular(r) = &mut profile.per_dm[dm] {
        r.set_params(theta);
    }
}

impl TeamObjective for MonteCarloTeam<'_> {
    fn sweep(&mut self, profile: &PolicyProfile, index: usize) -> Result<(PolicyProfile, SweepRecord)> {
        profile.check(self.problem)?;
        let seed = sweep_seed(self.seed, index);
        let n_dm = self.problem.dm_count();
        let mut current = profile.clone();
        let mut change = vec![0.0; n_dm];
        let mut failed = vec![false; n_dm];
        for dm in self.order(index) {
            match &current.per_dm[dm] {
                Policy::Regular(_) => {
                    let (next, c, f) = self.newton_block(&current, dm, seed)?;
                    current = next;
                    change[dm] = c;
                    failed[dm] = f;
                }
                Policy::Relaxed(_) => {
                    if !self.problem.is_discrete() {
                        return Err(TeamsError::InvalidArgument(
                            "relaxed policies are optimized through the discrete static reduction".into(),
                        ));
                    }
                    let (next, c) = relaxed_block_update(self.problem, &current, dm, self.n_paths, seed)?;
                    current = next;
                    change[dm] = c;
                }
            }
        }
        let payoff = self.evaluate(&current, seed)?;
        let used_paths = self.n_paths;
        let max_residual = self.max_residual(&current, residual_seed(self.seed, index))?;
        if let Some(prev) = self.last_payoff {
            if prev.value - payoff.value < 2.0 * payoff.stderr && self.n_paths < self.max_paths {
                self.n_paths = (2 * self.n_paths).min(self.max_paths);
                log::debug!("path budget raised to {}", self.n_paths);
            }
        }
        self.last_payoff = Some(payoff);
        let record = SweepRecord {
            sweep: index,
            payoff: payoff.value,
            stderr: payoff.stderr,
            max_residual,
            n_paths: used_paths,
            coef_change: change,
            line_search_failed: failed,
        };
        Ok((current, record))
    }

    fn payoff(&mut self, profile: &PolicyProfile) -> Result<Estimate> {
        self.evaluate(profile, sweep_seed(self.seed, 0))
    }

    fn max_residual(&mut self, profile: &PolicyProfile, seed: u64) -> Result<f64> {
        if self.problem.is_discrete() {
            Ok(stationarity_residual(self.problem, profile, &self.reg, self.n_paths, seed)?.max_residual)
        } else {
            crate::fbsde::hamiltonian_max_residual(self.problem, profile, &self.reg, self.n_paths, seed, self.dt)
        }
    }

    fn sufficient(&self) -> bool {
        self.certified
    }
}

/// One Monte Carlo sweep with default settings (continuous grids use `Δt = 10⁻²`).
pub fn pbp_sweep(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    reg: &RegressionSpec,
    n_paths: usize,
    seed: u64,
) -> Result<(PolicyProfile, SweepRecord)> {
    MonteCarloTeam::new(problem, reg.clone(), n_paths, seed).sweep(profile, 0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RealizationMode {
    /// Probability-weighted mean action, projected to the nearest atom.
    Mean,
    /// Most probable atom, lowest index on ties.
    Mode,
    /// One atom drawn per cell.
    Sampled { seed: u64 },
}

/// Regular policy playing one atom per (segment, cell) through an indicator basis.
pub fn realize_regular(relaxed: &RelaxedPolicy, mode: RealizationMode) -> RegularPolicy {
    let d = relaxed.atoms.first().map_or(0, |a| a.len());
    let coefficients = relaxed
        .probs
        .iter()
        .enumerate()
        .map(|(s, table)| {
            let mut c = Mat::zeros(d, table.len());
            for (cell, row) in table.iter().enumerate() {
                let atom = match mode {
                    RealizationMode::Mean => {
                        let mut mean = vec![0.0; d];
                        for (p, a) in row.iter().zip(&relaxed.atoms) {
                            for k in 0..d {
                                mean[k] += p * a[k];
                            }
                        }
                        nearest_atom(&relaxed.atoms, &mean)
                    }
                    RealizationMode::Mode => {
                        row.iter().enumerate().fold(0, |best, (k, p)| if *p > row[best] { k } else { best })
                    }
                    RealizationMode::Sampled { seed } => {
                        let mut rng = path_stream(seed, StreamDomain::Restart, ((s as u64) << 32) | cell as u64);
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        row.iter()
                            .position(|p| {
                                acc += p;
                                u < acc
                            })
                            .unwrap_or_else(|| row.iter().rposition(|p| *p > 0.0).unwrap_or(0))
                    }
                };
                for k in 0..d {
                    c[(k, cell)] = relaxed.atoms[atom][k];
                }
            }
            c
        })
        .collect();
    RegularPolicy {
        basis: Basis::Indicator { edges: relaxed.edges.clone() },
        recent: relaxed.recent,
        switch_times: relaxed.switch_times.clone(),
        coefficients,
    }
}

/// Realizes every relaxed policy of a profile.
pub fn realize_profile(profile: &PolicyProfile, mode: RealizationMode) -> PolicyProfile {
    PolicyProfile {
        per_dm: profile
            .per_dm
            .iter()
            .map(|p| match p {
                Policy::Relaxed(r) => Policy::Regular(realize_regular(r, mode)),
                other => other.clone(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RealizationReport {
    pub relaxed: Estimate,
    pub regular: Estimate,
    /// `regular − relaxed`.
    pub gap: f64,
}

pub fn realization_report(
    obj: &mut dyn TeamObjective,
    profile: &PolicyProfile,
    mode: RealizationMode,
) -> Result<(PolicyProfile, RealizationReport)> {
    let regular = realize_profile(profile, mode);
    let a = obj.payoff(profile)?;
    let b = obj.payoff(&regular)?;
    Ok((regular, RealizationReport { relaxed: a, regular: b, gap: b.value - a.value }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(sweep: usize) -> SweepRecord {
        SweepRecord {
            sweep,
            payoff: 1.5,
            stderr: 0.01,
            max_residual: 0.2,
            n_paths: 100,
            coef_change: vec![0.5, 0.25],
            line_search_failed: vec![false, true],
        }
    }

    #[test]
    fn trace_rejects_nonincreasing_sweeps() {
        let mut t = SolveTrace::new(2);
        t.push(record(0)).unwrap();
        assert!(t.push(record(0)).is_err());
    }

    #[test]
    fn empty_trace_is_header_only() {
        let mut buf = Vec::new();
        SolveTrace::new(2).write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "sweep,payoff,stderr,max_residual,n_paths,change_dm0,change_dm1\n");
    }

    #[test]
    fn json_lines_round_trip() {
        let mut t = SolveTrace::new(2);
        for s in 0..3 {
            t.push(record(s)).unwrap();
        }
        let mut buf = Vec::new();
        t.write_json_lines(&mut buf).unwrap();
        assert_eq!(SolveTrace::read_json_lines(buf.as_slice(), 2).unwrap(), t);
    }

    #[test]
    fn realizations_of_point_masses_agree() {
        let mut r = RelaxedPolicy::uniform(vec![0.0], vec![], vec![vec![-1.0], vec![1.0]], 1);
        r.set_point_mass(0, 0, 1);
        r.set_point_mass(0, 1, 0);
        let a = realize_regular(&r, RealizationMode::Mean);
        assert_eq!(a, realize_regular(&r, RealizationMode::Mode));
        assert_eq!(a, realize_regular(&r, RealizationMode::Sampled { seed: 3 }));
        assert_eq!(a.coefficients[0].as_slice(), &[1.0, -1.0]);
    }

    #[test]
    fn mean_realization_of_symmetric_mixture_is_nearest_zero() {
        let r = RelaxedPolicy::uniform(vec![], vec![], vec![vec![-1.0], vec![0.1], vec![1.0]], 1);
        let a = realize_regular(&r, RealizationMode::Mean);
        assert_eq!(a.coefficients[0].as_slice(), &[0.1]);
    }
}
