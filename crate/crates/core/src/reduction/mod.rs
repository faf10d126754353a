//! Static reduction of discrete-time team problems: the reference-measure
//! payoff, regression-based conditional expectations and stationarity
//! residuals of the per-DM conditional variational inequalities.

pub mod finite;
pub mod local;
pub mod regression;

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use finite::{FiniteTeam, Tables};
pub use local::StaticIntegrand;
pub use regression::{conditional_expectation, fit, Predictor, RegressionBasis, RegressionSpec};

use crate::error::{Result, TeamsError};
use crate::girsanov::{payoff_reference, theta_weight, WeightedEstimate};
use crate::pbp::pathwise::pathwise_gradient;
use crate::policy::{Policy, PolicyProfile};
use crate::problem::{ActionSet, TeamProblem};
use crate::simulate::{feature_table, simulate_discrete, FeatureTable, Measure};

/// Original-measure payoff computed as a Θ-weighted mean over independent
/// normal states and observations.
pub fn static_payoff(problem: &TeamProblem, profile: &PolicyProfile, n_paths: usize, seed: u64) -> Result<WeightedEstimate> {
    let ens = simulate_discrete(problem, profile, n_paths, seed, Measure::Reference)?;
    let w = theta_weight(problem, &ens)?;
    payoff_reference(problem, &ens, &w)
}

/// Per (DM, stage) stationarity residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityReport {
    /// `residual[dm][stage]`, nonnegative.
    pub residual: Vec<Vec<f64>>,
    /// Pure-estimation scale of each residual (0 where conditioning is exact).
    pub noise_floor: Vec<Vec<f64>>,
    pub max_residual: f64,
    /// `(dm, stage)` cells where one-sided finite differences disagree by more
    /// than 20%: the cost is not differentiable there.
    pub nonsmooth: Vec<(usize, usize)>,
}

impl StationarityReport {
    fn new(residual: Vec<Vec<f64>>, noise_floor: Vec<Vec<f64>>, nonsmooth: Vec<(usize, usize)>) -> Self {
        let max_residual = residual.iter().flatten().cloned().fold(0.0, f64::max);
        StationarityReport { residual, noise_floor, max_residual, nonsmooth }
    }

    pub fn max_noise_floor(&self) -> f64 {
        self.noise_floor.iter().flatten().cloned().fold(0.0, f64::max)
    }

    /// Columns `dm,stage,residual`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["dm", "stage", "residual"]).map_err(csv_err)?;
        for (i, row) in self.residual.iter().enumerate() {
            for (t, r) in row.iter().enumerate() {
                out.write_record([i.to_string(), t.to_string(), format!("{r:e}")]).map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> TeamsError {
    TeamsError::Io(e.to_string())
}

fn stages_of(problem: &TeamProblem) -> Result<usize> {
    match &problem.flavor {
        crate::problem::Flavor::DiscreteTime { stages, .. } => Ok(*stages),
        _ => Err(TeamsError::InvalidArgument("the static reduction needs a discrete-time problem".into())),
    }
}

/// Atoms a DM chooses among when its action set or policy is finite.
fn finite_atoms(problem: &TeamProblem, profile: &PolicyProfile, dm: usize) -> Option<Vec<Vec<f64>>> {
    match (&profile.per_dm[dm], &problem.dms[dm].action.set) {
        (Policy::Relaxed(r), _) => Some(r.atoms.clone()),
        (_, ActionSet::Grid { atoms }) => Some(atoms.clone()),
        _ => None,
    }
}

/// Estimates, for every DM `k` and stage `t`, how far the profile is from the
/// conditional variational inequality of `uᵏ(t)` given DM `k`'s features.
///
/// Box action sets: the pathwise derivative of the path cost with respect to
/// `uᵏ(t)` is regressed on the features, projected onto feasible directions and
/// averaged in norm. Finite action sets: the Θ-weighted gain of switching to each
/// atom is conditioned on the features (exactly per cell for relaxed policies),
/// and the residual is the expected best improvement.
pub fn stationarity_residual(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    reg: &RegressionSpec,
    n_paths: usize,
    seed: u64,
) -> Result<StationarityReport> {
    let stages = stages_of(problem)?;
    reg.check()?;
    let n_dm = problem.dm_count();
    let atoms: Vec<Option<Vec<Vec<f64>>>> = (0..n_dm).map(|k| finite_atoms(problem, profile, k)).collect();
    let offs = problem.action_offsets();

    let mut residual = vec![vec![0.0; stages]; n_dm];
    let mut floor = vec![vec![0.0; stages]; n_dm];

    let reference = simulate_discrete(problem, profile, n_paths, seed, Measure::Reference)?;
    let stat = StaticIntegrand::new(problem, reference)?;

    if atoms.iter().any(|a| a.is_none()) {
        let ens = simulate_discrete(problem, profile, n_paths, seed, Measure::Original)?;
        let pg = pathwise_gradient(problem, profile, &ens)?;
        for k in (0..n_dm).filter(|k| atoms[*k].is_none()) {
            let ft = feature_table(problem, k, profile.per_dm[k].recent(), &ens)?;
            let d = problem.dms[k].action.dim;
            let cells: Vec<(f64, f64)> = (0..stages)
                .into_par_iter()
                .map(|t| {
                    let targets: Vec<f64> =
                        (0..n_paths).flat_map(|p| pg.at(p, t)[offs[k]..offs[k] + d].to_vec()).collect();
                    let pred = fit(&ft.node(t), ft.dim, &targets, d, reg)?;
                    let spec = &problem.dms[k].action;
                    let mut g = vec![0.0; d];
                    let total: f64 = (0..n_paths)
                        .map(|p| {
                            pred.predict(ft.at(p, t), &mut g);
                            spec.project_gradient(ens.action(k, p, t), &mut g);
                            g.iter().map(|v| v * v).sum::<f64>().sqrt()
                        })
                        .sum();
                    let nf = pred.noise_floor().iter().map(|v| v * v).sum::<f64>().sqrt();
                    Ok((total / n_paths as f64, nf))
                })
                .collect::<Result<Vec<_>>>()?;
            for (t, (r, nf)) in cells.into_iter().enumerate() {
                residual[k][t] = r;
                floor[k][t] = nf;
            }
        }
    }

    for k in 0..n_dm {
        let Some(atoms) = &atoms[k] else { continue };
        let ft = feature_table(problem, k, profile.per_dm[k].recent(), &stat.ensemble)?;
        for t in 0..stages {
            let gains: Vec<Vec<f64>> = atoms.iter().map(|a| stat.switch_gains(t, k, a)).collect();
            let (r, nf) = match &profile.per_dm[k] {
                Policy::Relaxed(rel) => {
                    let mut by_cell: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
                    for p in 0..n_paths {
                        let row = by_cell.entry(rel.cell(ft.at(p, t))).or_insert_with(|| vec![0.0; atoms.len()]);
                        for (a, g) in gains.iter().enumerate() {
                            row[a] += g[p];
                        }
                    }
                    let gap: f64 = by_cell.values().map(|row| (-row.iter().cloned().fold(f64::INFINITY, f64::min)).max(0.0)).sum();
                    (gap * stat.unit(), 0.0)
                }
                Policy::Regular(_) => {
                    let targets: Vec<f64> = (0..n_paths).flat_map(|p| gains.iter().map(move |g| g[p])).collect();
                    let pred = fit(&ft.node(t), ft.dim, &targets, atoms.len(), reg)?;
                    let mut out = vec![0.0; atoms.len()];
                    let gap: f64 = (0..n_paths)
                        .map(|p| {
                            pred.predict(ft.at(p, t), &mut out);
                            (-out.iter().cloned().fold(f64::INFINITY, f64::min)).max(0.0)
                        })
                        .sum();
                    let nf = pred.noise_floor().into_iter().fold(0.0, f64::max);
                    (gap * stat.unit(), nf * stat.shift.exp())
                }
            };
            residual[k][t] = r;
            floor[k][t] = nf;
        }
    }

    let nonsmooth = smoothness_check(problem, &stat, &atoms, stages);
    Ok(StationarityReport::new(residual, floor, nonsmooth))
}

/// Compares forward and backward one-sided differences (steps `±10⁻⁴·scale`) of
/// the Θ-weighted integrand. Skipped when the weights are degenerate.
fn smoothness_check(
    problem: &TeamProblem,
    stat: &StaticIntegrand,
    atoms: &[Option<Vec<Vec<f64>>>],
    stages: usize,
) -> Vec<(usize, usize)> {
    let n = stat.n_paths();
    if stat.ess() < 0.05 * n as f64 {
        log::debug!("smoothness check skipped: effective sample size {:.1} of {n}", stat.ess());
        return Vec::new();
    }
    let mut flagged = Vec::new();
    for (k, dm) in problem.dms.iter().enumerate() {
        if atoms[k].is_some() {
            continue;
        }
        let h = 1e-4 * dm.action.scale();
        for t in 0..stages {
            let (num, den) = (0..n)
                .into_par_iter()
                .map(|p| {
                    let u = stat.ensemble.action(k, p, t).to_vec();
                    let base = stat.value(p);
                    let mut num = 0.0;
                    let mut den = 0.0;
                    for c in 0..u.len() {
                        let mut v = u.clone();
                        v[c] = u[c] + h;
                        let (dl, dc) = stat.local_delta(p, t, k, &v);
                        let fwd = (stat.value_with(p, dl, dc) - base) / h;
                        v[c] = u[c] - h;
                        let (dl, dc) = stat.local_delta(p, t, k, &v);
                        let bwd = (base - stat.value_with(p, dl, dc)) / h;
                        num += (fwd - bwd).abs();
                        den += 0.5 * (fwd.abs() + bwd.abs());
                    }
                    (num, den)
                })
                .reduce(|| (0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            if num > 0.2 * den && num > 1e-12 {
                log::warn!("nonsmooth cost: DM {k}, stage {t}");
                flagged.push((k, t));
            }
        }
    }
    flagged
}

/// Exact per-cell minimization of a relaxed policy over its atoms on one
/// reference ensemble (static reduction). Cells are visited in index order and
/// each choice is committed before the next, ties going to the lowest atom.
/// Returns the updated profile and the L1 change of the probability tables.
pub fn relaxed_block_update(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    dm: usize,
    n_paths: usize,
    seed: u64,
) -> Result<(PolicyProfile, f64)> {
    let stages = stages_of(problem)?;
    let Policy::Relaxed(rel) = &profile.per_dm[dm] else {
        return Err(TeamsError::InvalidArgument(format!("policy of DM {dm} is not relaxed")));
    };
    let reference = simulate_discrete(problem, profile, n_paths, seed, Measure::Reference)?;
    let mut stat = StaticIntegrand::new(problem, reference)?;
    let ft: FeatureTable = feature_table(problem, dm, rel.recent, &stat.ensemble)?;
    let mut groups: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
    for p in 0..n_paths {
        for t in 0..stages {
            let key = (rel.segment(t as f64), rel.cell(ft.at(p, t)));
            groups.entry(key).or_default().push((p, t));
        }
    }
    let mut next = rel.clone();
    let mut change = 0.0;
    for ((seg, cell), visits) in groups {
        let mut best = (0, f64::INFINITY);
        for (a, atom) in rel.atoms.iter().enumerate() {
            let mut total = 0.0;
            let mut i = 0;
            while i < visits.len() {
                let p = visits[i].0;
                let (mut dl, mut dc) = (0.0, 0.0);
                while i < visits.len() && visits[i].0 == p {
                    let (l, c) = stat.local_delta(p, visits[i].1, dm, atom);
                    dl += l;
                    dc += c;
                    i += 1;
                }
                total += stat.value_with(p, dl, dc) - stat.value(p);
            }
            if total < best.1 {
                best = (a, total);
            }
        }
        let before = next.probs[seg][cell].clone();
        next.set_point_mass(seg, cell, best.0);
        change += before.iter().zip(&next.probs[seg][cell]).map(|(a, b)| (a - b).abs()).sum::<f64>();
        for &(p, t) in &visits {
            stat.commit(p, t, dm, &rel.atoms[best.0]);
        }
    }
    let mut out = profile.clone();
    out.per_dm[dm] = Policy::Relaxed(next);
    Ok((out, change))
}
