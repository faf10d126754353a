//! End-to-end acceptance suite. Runs without the libtest harness so that the
//! PASS/FAIL line of every criterion is always shown; exits nonzero if any
//! criterion fails.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use teams::builtin::{self, lq_feedback, lq_scalar, radner, radner_gains, tanh_filter, tanh_filter_discrete};
use teams::cli::{run, RunConfig};
use teams::fbsde::{bsde_solve, chain_rule_gradient, mp_improve};
use teams::girsanov::{exponential_weight, payoff_original, payoff_reference, theta_weight};
use teams::pbp::{solve_team, Certificate, MonteCarloTeam, SolveOptions};
use teams::policy::{Basis, Policy, PolicyProfile};
use teams::problem::TeamProblem;
use teams::reduction::RegressionSpec;
use teams::simulate::{problem_grid, simulate_range, Measure};
use teams::witsenhausen::{
    wits_affine_baseline, wits_bruteforce, wits_fixed_point, wits_payoff, CoarseGrid, StagePolicies, WitsenhausenSpec,
};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn grid_for(problem: &TeamProblem, dt: f64) -> teams::simulate::TimeGrid {
    problem_grid(problem, dt).unwrap()
}

/// Λ and Θ are mean-one martingales under the reference measure.
fn martingale_mean() -> Outcome {
    let n = 100_000;
    let p = tanh_filter();
    let (_, prof) = builtin::by_name("tanh_filter").unwrap();
    let ens = simulate_range(&p, &prof, grid_for(&p, 1e-2), n, 101, Measure::Reference, 0).unwrap();
    let lam = exponential_weight(&p, &ens).unwrap();
    let mut worst: f64 = 0.0;
    for j in 0..ens.nodes() {
        let e = lam.mean_at(j);
        let z = if e.stderr > 0.0 { (e.value - 1.0).abs() / e.stderr } else if e.value == 1.0 { 0.0 } else { f64::INFINITY };
        worst = worst.max(z);
    }
    let d = tanh_filter_discrete();
    let (_, dprof) = builtin::by_name("tanh_filter_discrete").unwrap();
    let dens = simulate_range(&d, &dprof, grid_for(&d, 1.0), n, 102, Measure::Reference, 0).unwrap();
    let theta = theta_weight(&d, &dens).unwrap();
    let mut worst_d: f64 = 0.0;
    for j in 0..dens.nodes() {
        let e = theta.mean_at(j);
        let z = if e.stderr > 0.0 { (e.value - 1.0).abs() / e.stderr } else if e.value == 1.0 { 0.0 } else { f64::INFINITY };
        worst_d = worst_d.max(z);
    }
    outcome(
        worst <= 4.0 && worst_d <= 4.0,
        format!("max |mean Λ − 1| = {worst:.2} stderr over {} nodes, max |mean Θ − 1| = {worst_d:.2} stderr", ens.nodes()),
    )
}

/// Reference-measure and original-measure payoffs agree on every suite problem.
fn cross_measure_identity() -> Outcome {
    let n = 50_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, (p, prof)) in builtin::test_suite().into_iter().enumerate() {
        let grid = grid_for(&p, 1e-2);
        let refe = simulate_range(&p, &prof, grid, n, 200 + k as u64, Measure::Reference, 0).unwrap();
        let w = if p.is_discrete() { theta_weight(&p, &refe) } else { exponential_weight(&p, &refe) }.unwrap();
        let jr = payoff_reference(&p, &refe, &w).unwrap();
        let orig = simulate_range(&p, &prof, grid, n, 300 + k as u64, Measure::Original, 0).unwrap();
        let jo = payoff_original(&p, &orig).unwrap();
        let z = (jr.value - jo.value).abs() / (jr.stderr.powi(2) + jo.stderr.powi(2)).sqrt();
        ok &= z <= 3.0;
        parts.push(format!("{} {z:.2}", p.name));
    }
    outcome(ok, format!("|ref − orig| / combined stderr: {}", parts.join(", ")))
}

/// Relaxed person-by-person iteration finds the enumeration optimum.
fn static_team_oracle() -> Outcome {
    let mut team = builtin::finite_coordination().unwrap();
    let (_, best) = team.enumerate(1 << 20).unwrap();
    let init = team.to_profile(&team.uniform_tables());
    let opts = SolveOptions { budget: 50, tol: 1e-8, restarts: 16, seed: 3 };
    let out = solve_team(&mut team, &init, &opts).unwrap();
    let gap = out.payoff.value - best;
    outcome(
        gap.abs() <= 1e-6 && out.max_residual <= 1e-8,
        format!(
            "payoff {:.9} vs enumeration {:.9} (gap {gap:.1e}), residual {:.1e}",
            out.payoff.value, best, out.max_residual
        ),
    )
}

fn linear_gain(profile: &PolicyProfile, dm: usize) -> f64 {
    match &profile.per_dm[dm] {
        Policy::Regular(r) => r.coefficients[0].as_slice()[1],
        Policy::Relaxed(_) => panic!("expected a regular policy"),
    }
}

/// Person-by-person Newton sweeps recover the Radner gains with a sufficiency certificate.
fn radner_recovery() -> Outcome {
    let (s1, s2) = (0.5, 1.0);
    let p = radner(s1, s2);
    let init = PolicyProfile::zeros(&p, Basis::Polynomial { degree: 1 }, 1, vec![]);
    let mut team = MonteCarloTeam::new(&p, RegressionSpec::polynomial(1), 50_000, 41);
    team.max_paths = 200_000;
    let out = solve_team(&mut team, &init, &SolveOptions { budget: 20, tol: 2e-3, restarts: 0, seed: 41 }).unwrap();
    let (a1, a2) = radner_gains(s1, s2);
    let (g1, g2) = (linear_gain(&out.profile, 0), linear_gain(&out.profile, 1));
    let err = (g1 - a1).abs().max((g2 - a2).abs());
    outcome(
        err <= 1e-2 && out.certificate == Certificate::TeamOptimalSufficient,
        format!(
            "gains ({g1:.4}, {g2:.4}) vs ({a1:.4}, {a2:.4}), max error {err:.1e}, certificate {:?}",
            out.certificate
        ),
    )
}

/// Backward RK4 solution of `−K' = 2aK − b²K²/r + q`, `K(T) = m`, on `steps` intervals of `[0, 1]`.
fn riccati(a: f64, b: f64, q: f64, r: f64, m: f64, steps: usize) -> Vec<f64> {
    let h = 1.0 / steps as f64;
    let f = |k: f64| -(2.0 * a * k - b * b * k * k / r + q);
    let mut k = vec![m; steps + 1];
    for i in (0..steps).rev() {
        let y = k[i + 1];
        let k1 = f(y);
        let k2 = f(y - 0.5 * h * k1);
        let k3 = f(y - 0.5 * h * k2);
        let k4 = f(y - h * k3);
        k[i] = y - h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    }
    k
}

/// The adjoint tracks `K(t) x(t)` and maximum-principle improvement reaches the
/// Riccati payoff.
fn lq_riccati() -> Outcome {
    let (a, b, q, r, m) = (-0.5, 1.0, 1.0, 1.0, 1.0);
    let p = lq_scalar(a, b, q, r, m);
    let k = riccati(a, b, q, r, m, 100);
    let gains: Vec<f64> = k[..100].iter().map(|v| -b / r * v).collect();
    let optimal = lq_feedback(&gains, 1.0);
    let n = 10_000;
    let grid = grid_for(&p, 1e-2);
    let ens = simulate_range(&p, &optimal, grid, n, 51, Measure::Original, 0).unwrap();
    let adj = bsde_solve(&p, &optimal, &ens, &RegressionSpec::polynomial(2)).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for j in 0..ens.nodes() {
        for path in 0..n {
            let kx = k[j] * ens.state(path, j)[0];
            num += (adj.psi_at(path, j)[0] - kx).powi(2);
            den += kx * kx;
        }
    }
    let rms = (num / den).sqrt();

    // E[½K(0)x₀²] + ½∫σ²K dt with x₀ ~ N(1, ¼).
    let sigma2 = builtin::LQ_SIGMA * builtin::LQ_SIGMA;
    let integral: f64 = (0..100).map(|i| 0.005 * (k[i] + k[i + 1])).sum();
    let analytic = 0.5 * k[0] * 1.25 + 0.5 * sigma2 * integral;

    let zero = PolicyProfile::zeros(&p, Basis::Polynomial { degree: 1 }, 1, (1..10).map(|i| i as f64 / 10.0).collect());
    let steps = 20;
    let (improved, _) = mp_improve(&p, &zero, steps, &RegressionSpec::polynomial(2), 4000, 52, 1e-2).unwrap();
    let eval = |prof: &PolicyProfile| {
        let e = simulate_range(&p, prof, grid, 100_000, 53, Measure::Original, 0).unwrap();
        payoff_original(&p, &e).unwrap()
    };
    let j_improved = eval(&improved);
    let j_riccati = eval(&optimal);
    let rel = (j_improved.value - j_riccati.value) / j_riccati.value;
    outcome(
        rms <= 0.05 && rel <= 0.02,
        format!(
            "ψ vs K x RMS relative error {:.2}%; after {steps} steps payoff {:.5} vs Riccati policy {:.5} \
             (analytic {analytic:.5}), excess {:.2}%",
            100.0 * rms,
            j_improved.value,
            j_riccati.value,
            100.0 * rel
        ),
    )
}

/// Zero, affine and fixed-point payoffs are ordered, the fixed point is
/// stationary and close to the coarse brute-force value.
fn witsenhausen_chain() -> Outcome {
    let spec = WitsenhausenSpec::new(0.5, 1.0, 1.0).unwrap();
    let zero = wits_payoff(&spec, &StagePolicies::zero(&spec)).unwrap();
    let ((a, b), affine) = wits_affine_baseline(&spec).unwrap();
    let fp = wits_fixed_point(&spec, &StagePolicies::affine(&spec, a, b), 500, 1e-9).unwrap();
    let fixed = wits_payoff(&spec, &fp.policies).unwrap();
    let last = fp.trace.last().unwrap();
    let stationarity = last.stage1.max(last.stage2);
    let brute = wits_bruteforce(&spec, &CoarseGrid::default()).unwrap();
    let rel = (fixed - brute.payoff).abs() / brute.payoff;
    let chain = zero >= affine && affine >= fixed - 1e-6;
    outcome(
        chain && stationarity <= 1e-4 && rel <= 0.05,
        format!(
            "zero {zero:.5} ≥ affine {affine:.5} ≥ fixed point {fixed:.5}: {chain}; stationarity {stationarity:.1e}; \
             brute force {:.5} (relative gap {:.2}%)",
            brute.payoff,
            100.0 * rel
        ),
    )
}

fn params(profile: &PolicyProfile, dm: usize) -> Vec<f64> {
    match &profile.per_dm[dm] {
        Policy::Regular(r) => r.params(),
        Policy::Relaxed(_) => vec![],
    }
}

fn with_params(profile: &PolicyProfile, dm: usize, theta: &[f64]) -> PolicyProfile {
    let mut out = profile.clone();
    if let Policy::Regular(r) = &mut out.per_dm[dm] {
        r.set_params(theta);
    }
    out
}

/// Chain-rule Hamiltonian gradient against common-random-number central differences.
fn gradient_fidelity() -> Outcome {
    let suite: Vec<(TeamProblem, PolicyProfile)> =
        builtin::test_suite().into_iter().filter(|(p, _)| !p.is_discrete()).collect();
    let n = 20_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for (k, (p, prof)) in suite.iter().enumerate() {
        let seed = 700 + k as u64;
        let grid = grid_for(p, 1e-2);
        let ens = simulate_range(p, prof, grid, n, seed, Measure::Original, 0).unwrap();
        let adj = bsde_solve(p, prof, &ens, &RegressionSpec::polynomial(2)).unwrap();
        let cg = chain_rule_gradient(p, prof, &ens, &adj).unwrap();
        drop(ens);
        let (mut analytic, mut fd) = (Vec::new(), Vec::new());
        for dm in 0..p.dm_count() {
            analytic.extend(cg.means(dm));
            let theta = params(prof, dm);
            for i in 0..theta.len() {
                let h = 1e-3 * (1.0 + theta[i].abs());
                let mut plus = theta.clone();
                plus[i] += h;
                let mut minus = theta.clone();
                minus[i] -= h;
                let j = |t: &[f64]| {
                    let e = simulate_range(p, &with_params(prof, dm, t), grid, n, seed, Measure::Original, 0).unwrap();
                    payoff_original(p, &e).unwrap().value
                };
                fd.push((j(&plus) - j(&minus)) / (2.0 * h));
            }
        }
        let dot: f64 = analytic.iter().zip(&fd).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = dot / (norm(&analytic) * norm(&fd));
        ok &= cos >= 0.95;
        parts.push(format!("{} {cos:.4}", p.name));
    }
    outcome(ok, format!("cosine similarity: {}", parts.join(", ")))
}

fn csv_hashes(config: &str, out: &Path, workers: usize) -> Vec<(String, String)> {
    let cfg = RunConfig::from_json(&config.replace("OUT", &out.display().to_string())).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers).build().unwrap();
    let report = pool.install(|| run(&cfg, out)).unwrap();
    report.manifest.into_iter().filter(|m| m.file.ends_with(".csv")).map(|m| (m.file, m.sha256)).collect()
}

/// Reruns and different worker counts give byte-identical CSV artifacts.
fn determinism() -> Outcome {
    let configs = [
        r#"{"version": 1, "problem": {"builtin": "tanh_filter"}, "solver": {"kind": "evaluate"}, "n_paths": 5000, "seed": 9, "out": "OUT"}"#,
        r#"{"version": 1, "problem": {"builtin": "radner"}, "solver": {"kind": "pbp"}, "n_paths": 2000, "budget": 3, "seed": 9, "out": "OUT"}"#,
        r#"{"version": 1, "problem": {"builtin": "lq_scalar"}, "solver": {"kind": "mp"}, "n_paths": 1000, "budget": 3, "dt": 0.02, "seed": 9, "out": "OUT"}"#,
        r#"{"version": 1, "solver": {"kind": "witsenhausen", "spec": {"k": 0.5, "sigma0": 1.0, "sigmav": 1.0},
            "coarse": {"x_atoms": 7, "y_bins": 7, "action_atoms": 9, "x_range": 3.0, "y_range": 2.0, "restarts": 4}},
            "budget": 50, "tol": 1e-9, "seed": 9, "out": "OUT"}"#,
    ];
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    let mut files = 0;
    for (i, cfg) in configs.iter().enumerate() {
        let a = csv_hashes(cfg, &dir.path().join(format!("{i}-a")), 1);
        let b = csv_hashes(cfg, &dir.path().join(format!("{i}-b")), 4);
        let c = csv_hashes(cfg, &dir.path().join(format!("{i}-c")), 4);
        ok &= !a.is_empty() && a == b && b == c;
        files += a.len();
    }
    outcome(ok, format!("{files} CSV files compared across 1 and 4 workers and a rerun"))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, Duration); 8] = [
        ("1 martingale mean", martingale_mean, Duration::from_secs(30)),
        ("2 cross-measure payoff identity", cross_measure_identity, Duration::from_secs(60)),
        ("3 static-team oracle", static_team_oracle, Duration::from_secs(10)),
        ("4 Radner linear recovery", radner_recovery, Duration::from_secs(60)),
        ("5 LQ Riccati oracle", lq_riccati, Duration::from_secs(300)),
        ("6 Witsenhausen dominance chain", witsenhausen_chain, Duration::from_secs(120)),
        ("7 gradient fidelity", gradient_fidelity, Duration::from_secs(120)),
        ("8 determinism", determinism, Duration::from_secs(300)),
    ];
    let mut failed = Vec::new();
    for (name, check, limit) in criteria {
        let start = Instant::now();
        let out = check();
        let elapsed = start.elapsed();
        let timely = elapsed <= limit;
        let pass = out.passed && timely;
        println!(
            "criterion {name}: {} ({:.1}s of {}s) {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            out.detail
        );
        if !pass {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
