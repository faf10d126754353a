//! Likelihood processes linking the reference and original measures, and payoff
//! estimators under either measure.
//!
//! Weights are kept in log domain. A weighted mean is formed as
//! `e^s · mean(e^{log w − s} · c)` with `s` the largest log weight.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeamsError};
use crate::numerics::{pairwise_sum, Estimate};
use crate::problem::{Flavor, ScalarField, TeamProblem, VectorField};
use crate::simulate::{path_costs, Measure, PathEnsemble};

/// Which likelihood a process carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LikelihoodKind {
    /// Continuous-time exponential martingale Λ.
    Exponential,
    /// Discrete-time density ratio Θ.
    Theta,
}

/// Per-path log-likelihood trajectories, reference → original.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodProcess {
    pub kind: LikelihoodKind,
    pub n_paths: usize,
    pub nodes: usize,
    /// `log_values[p * nodes + j]`.
    pub log_values: Vec<f64>,
}

impl LikelihoodProcess {
    pub fn log_at(&self, p: usize, j: usize) -> f64 {
        self.log_values[p * self.nodes + j]
    }

    pub fn terminal_logs(&self) -> Vec<f64> {
        (0..self.n_paths).map(|p| self.log_at(p, self.nodes - 1)).collect()
    }

    /// Log of the reverse weight ρ = 1/Λ.
    pub fn reverse(&self) -> LikelihoodProcess {
        LikelihoodProcess { log_values: self.log_values.iter().map(|v| -v).collect(), ..self.clone() }
    }

    /// Sample mean (with standard error) of the weight at node `j`.
    pub fn mean_at(&self, j: usize) -> Estimate {
        let w: Vec<f64> = (0..self.n_paths).map(|p| self.log_at(p, j).exp()).collect();
        Estimate::from_samples(&w)
    }
}

/// Weighted payoff with its effective sample size `(Σw)²/Σw²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedEstimate {
    pub value: f64,
    pub stderr: f64,
    pub ess: f64,
}

const ESS_WARN_FRACTION: f64 = 0.05;

/// Mean of `exp(log_w) · c` with max-shift, plus standard error and ESS.
pub fn weighted_mean(log_w: &[f64], c: &[f64]) -> WeightedEstimate {
    let n = log_w.len();
    let s = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|l| (l - s).exp()).collect();
    let wc: Vec<f64> = w.iter().zip(c).map(|(a, b)| a * b).collect();
    let est = Estimate::from_samples(&wc);
    let sw = pairwise_sum(&w);
    let sw2 = pairwise_sum(&w.iter().map(|v| v * v).collect::<Vec<_>>());
    let ess = sw * sw / sw2;
    if ess < ESS_WARN_FRACTION * n as f64 {
        log::warn!("importance weights degenerate: effective sample size {ess:.1} of {n}");
    }
    let scale = s.exp();
    WeightedEstimate { value: est.value * scale, stderr: est.stderr * scale, ess }
}

/// Λ from a continuous-time reference ensemble:
/// `log Λ(t_{j+1}) = log Λ(t_j) + Σᵢ [hⁱᵀ Dⁱ⁻¹ Δyⁱ − ½ hⁱᵀ Dⁱ⁻¹ hⁱ Δt]`, with `hⁱ`
/// at the left endpoint and the actions stored in the ensemble.
pub fn exponential_weight(problem: &TeamProblem, ensemble: &PathEnsemble) -> Result<LikelihoodProcess> {
    if ensemble.discrete || !matches!(problem.flavor, Flavor::ContinuousTime { .. }) {
        return Err(TeamsError::InvalidArgument("exponential_weight needs a continuous-time problem".into()));
    }
    if ensemble.measure != Measure::Reference {
        return Err(TeamsError::WrongMeasure("Λ is computed on reference-measure paths".into()));
    }
    if ensemble.increments.is_none() {
        return Err(TeamsError::MissingIncrements);
    }
    check_dims(problem, ensemble)?;
    let factors = problem.factors()?;
    let grid = ensemble.grid;
    let dt = grid.dt();
    let nodes = ensemble.nodes();
    let log_values: Vec<f64> = (0..ensemble.n_paths)
        .into_par_iter()
        .flat_map_iter(|p| {
            let mut out = Vec::with_capacity(nodes);
            let mut acc = 0.0;
            let mut u = Vec::new();
            let mut h = Vec::new();
            let mut dih = Vec::new();
            let mut dy = Vec::new();
            out.push(0.0);
            for j in 0..grid.steps() {
                ensemble.joint_action(p, j, &mut u);
                let x = ensemble.state(p, j);
                for (i, dm) in problem.dms.iter().enumerate() {
                    let k = ensemble.obs_dims[i];
                    h.resize(k, 0.0);
                    dm.observation.eval(grid.time(j), x, &u, &mut h);
                    dih.clear();
                    dih.resize(k, 0.0);
                    factors.noise[i].inv.mul_vec_add(&h, &mut dih);
                    dy.clear();
                    dy.resize(k, 0.0);
                    factors.noise[i].sqrt.mul_vec_add(ensemble.obs_noise(i, p, j).unwrap(), &mut dy);
                    let cross: f64 = dih.iter().zip(&dy).map(|(a, b)| a * b).sum();
                    let quad: f64 = dih.iter().zip(&h).map(|(a, b)| a * b).sum();
                    acc += cross - 0.5 * quad * dt;
                }
                out.push(acc);
            }
            out
        })
        .collect();
    finite(LikelihoodProcess { kind: LikelihoodKind::Exponential, n_paths: ensemble.n_paths, nodes, log_values })
}

fn half_sq(z: &[f64]) -> f64 {
    0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

/// Θ from a discrete reference ensemble. Stage 0 carries only the observation
/// factor; stages `t ≥ 1` add the state-transition factor
/// `ζ(G⁻¹(x(t) − f(t−1, x(t−1), u(t−1)))) / (|G| ζ(x(t)))` and the observation
/// factor `λ(D^{-1/2}(y(t) − h(t, x(t), u(t−1)))) / (|D^{1/2}| λ(y(t)))`.
pub fn theta_weight(problem: &TeamProblem, ensemble: &PathEnsemble) -> Result<LikelihoodProcess> {
    let Flavor::DiscreteTime { gain, .. } = &problem.flavor else {
        return Err(TeamsError::InvalidArgument("theta_weight needs a discrete-time problem".into()));
    };
    if !ensemble.discrete {
        return Err(TeamsError::InvalidArgument("theta_weight needs a discrete ensemble".into()));
    }
    if ensemble.measure != Measure::Reference {
        return Err(TeamsError::WrongMeasure("Θ is computed on reference-measure paths".into()));
    }
    check_dims(problem, ensemble)?;
    let (g_inv, log_det_g) = gain.inverse_and_logdet().ok_or(TeamsError::SingularGain { stage: 0 })?;
    let factors = problem.factors()?;
    let n = problem.state_dim;
    let du = problem.joint_action_dim();
    let nodes = ensemble.nodes();
    let log_values: Vec<f64> = (0..ensemble.n_paths)
        .into_par_iter()
        .flat_map_iter(|p| {
            let mut out = Vec::with_capacity(nodes);
            let mut acc = 0.0;
            let mut prev_u = vec![0.0; du];
            let mut u = Vec::new();
            let mut f = vec![0.0; n];
            let mut r = vec![0.0; n];
            let mut h = Vec::new();
            let mut z = Vec::new();
            for t in 0..nodes {
                let x = ensemble.state(p, t);
                if t > 0 {
                    problem.drift.eval((t - 1) as f64, ensemble.state(p, t - 1), &prev_u, &mut f);
                    for c in 0..n {
                        f[c] = x[c] - f[c];
                    }
                    r.iter_mut().for_each(|v| *v = 0.0);
                    g_inv.mul_vec_add(&f, &mut r);
                    acc += -half_sq(&r) - log_det_g + half_sq(x);
                }
                for (i, dm) in problem.dms.iter().enumerate() {
                    let k = ensemble.obs_dims[i];
                    let y = ensemble.observation(i, p, t);
                    h.resize(k, 0.0);
                    dm.observation.eval(t as f64, x, &prev_u, &mut h);
                    for c in 0..k {
                        h[c] = y[c] - h[c];
                    }
                    z.clear();
                    z.resize(k, 0.0);
                    factors.noise[i].inv_sqrt.mul_vec_add(&h, &mut z);
                    acc += -half_sq(&z) - 0.5 * factors.noise[i].log_det + half_sq(y);
                }
                out.push(acc);
                ensemble.joint_action(p, t, &mut u);
                prev_u.copy_from_slice(&u);
            }
            out
        })
        .collect();
    finite(LikelihoodProcess { kind: LikelihoodKind::Theta, n_paths: ensemble.n_paths, nodes, log_values })
}

fn finite(l: LikelihoodProcess) -> Result<LikelihoodProcess> {
    if l.log_values.iter().all(|v| v.is_finite()) {
        Ok(l)
    } else {
        Err(TeamsError::NaNPayoff)
    }
}

fn check_dims(problem: &TeamProblem, ensemble: &PathEnsemble) -> Result<()> {
    if ensemble.state_dim != problem.state_dim
        || ensemble.obs_dims != problem.obs_dims()
        || ensemble.action_dims != problem.action_dims()
    {
        return Err(TeamsError::ShapeMismatch("ensemble dimensions differ from the problem".into()));
    }
    Ok(())
}

/// Weighted payoff under the reference measure. Continuous time:
/// `mean Σ_j w_j Λ(t_j) ℓ(t_j) + Λ(T) φ(x(T))` (trapezoid weights); discrete time:
/// `mean Θ_{0,T} (Σ_{t<T} ℓ(t) + φ(x(T)))`.
pub fn payoff_reference(
    problem: &TeamProblem,
    ensemble: &PathEnsemble,
    weights: &LikelihoodProcess,
) -> Result<WeightedEstimate> {
    if weights.n_paths != ensemble.n_paths || weights.nodes != ensemble.nodes() {
        return Err(TeamsError::ShapeMismatch(format!(
            "weights are {}×{}, ensemble is {}×{}",
            weights.n_paths,
            weights.nodes,
            ensemble.n_paths,
            ensemble.nodes()
        )));
    }
    if ensemble.measure != Measure::Reference {
        return Err(TeamsError::WrongMeasure("payoff_reference needs a reference-measure ensemble".into()));
    }
    check_dims(problem, ensemble)?;
    let terminal = weights.terminal_logs();
    let est = if ensemble.discrete {
        weighted_mean(&terminal, &path_costs(problem, ensemble))
    } else {
        // Each path contributes Σ_j w_j Λ_j ℓ_j + Λ_M φ; shift by the path's max
        // log weight, then by the global max, to keep every exponent ≤ 0.
        let grid = ensemble.grid;
        let nodes = ensemble.nodes();
        let (shift, value): (Vec<f64>, Vec<f64>) = (0..ensemble.n_paths)
            .into_par_iter()
            .map_init(Vec::new, |u, p| {
                let s = (0..nodes).map(|j| weights.log_at(p, j)).fold(f64::NEG_INFINITY, f64::max);
                let mut c = 0.0;
                for j in 0..nodes {
                    ensemble.joint_action(p, j, u);
                    let l = problem.running_cost.eval(grid.time(j), ensemble.state(p, j), u);
                    c += grid.trapezoid(j) * (weights.log_at(p, j) - s).exp() * l;
                }
                let phi = problem.terminal_cost.eval(grid.end(), ensemble.state(p, nodes - 1), &[]);
                c += (weights.log_at(p, nodes - 1) - s).exp() * phi;
                (s, c)
            })
            .unzip();
        let mut est = weighted_mean(&shift, &value);
        // ESS is a property of the terminal weights.
        est.ess = weighted_mean(&terminal, &vec![0.0; terminal.len()]).ess;
        est
    };
    if !est.value.is_finite() {
        return Err(TeamsError::NaNPayoff);
    }
    Ok(est)
}

/// Unweighted payoff on original-measure paths.
pub fn payoff_original(problem: &TeamProblem, ensemble: &PathEnsemble) -> Result<Estimate> {
    if ensemble.measure != Measure::Original {
        return Err(TeamsError::WrongMeasure("payoff_original needs an original-measure ensemble".into()));
    }
    check_dims(problem, ensemble)?;
    let est = Estimate::from_samples(&path_costs(problem, ensemble));
    if !est.value.is_finite() {
        return Err(TeamsError::NaNPayoff);
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{problem_grid, simulate_range};

    #[test]
    fn weighted_mean_is_shift_invariant() {
        let a = weighted_mean(&[0.0, 1.0, -2.0], &[1.0, 2.0, 3.0]);
        let b = weighted_mean(&[700.0, 701.0, 698.0], &[1.0, 2.0, 3.0]);
        assert!((a.value * 700f64.exp() / b.value - 1.0).abs() < 1e-12);
        assert!((a.ess - b.ess).abs() < 1e-12);
    }

    #[test]
    fn equal_weights_have_full_ess() {
        let e = weighted_mean(&[0.3; 10], &[1.0; 10]);
        assert!((e.ess - 10.0).abs() < 1e-12);
    }

    fn discrete_ensemble(p: &TeamProblem, n: usize, measure: Measure) -> PathEnsemble {
        let (_, prof) = crate::builtin::by_name(&p.name).unwrap();
        simulate_range(p, &prof, problem_grid(p, 1.0).unwrap(), n, 9, measure, 0).unwrap()
    }

    #[test]
    fn theta_matches_scalar_density_ratio() {
        // x(t+1) = 0.8 x + u + 0.5 w, y = tanh(x) + v, reference x ~ N(0,1), y ~ N(0,1).
        let p = crate::builtin::tanh_filter_discrete();
        let ens = discrete_ensemble(&p, 8, Measure::Reference);
        let theta = theta_weight(&p, &ens).unwrap();
        for path in 0..8 {
            let mut acc = 0.0;
            for t in 0..ens.nodes() {
                let x = ens.state(path, t)[0];
                if t > 0 {
                    let prev = ens.state(path, t - 1)[0];
                    let u = ens.action(0, path, t - 1)[0];
                    let r = (x - 0.8 * prev - u) / 0.5;
                    acc += -0.5 * r * r - 0.5f64.ln() + 0.5 * x * x;
                }
                let y = ens.observation(0, path, t)[0];
                acc += -0.5 * (y - x.tanh()).powi(2) + 0.5 * y * y;
                assert!((theta.log_at(path, t) - acc).abs() < 1e-10, "path {path} stage {t}");
            }
        }
    }

    #[test]
    fn reverse_weight_negates_logs() {
        let p = crate::builtin::tanh_filter_discrete();
        let theta = theta_weight(&p, &discrete_ensemble(&p, 4, Measure::Reference)).unwrap();
        let rev = theta.reverse();
        assert!(theta.log_values.iter().zip(&rev.log_values).all(|(a, b)| a == &-b));
    }

    #[test]
    fn weights_require_reference_paths() {
        let p = crate::builtin::tanh_filter_discrete();
        let orig = discrete_ensemble(&p, 4, Measure::Original);
        assert!(matches!(theta_weight(&p, &orig), Err(TeamsError::WrongMeasure(_))));
        let c = crate::builtin::tanh_filter();
        let (_, prof) = crate::builtin::by_name("tanh_filter").unwrap();
        let cont = simulate_range(&c, &prof, problem_grid(&c, 0.1).unwrap(), 4, 1, Measure::Original, 0).unwrap();
        assert!(matches!(exponential_weight(&c, &cont), Err(TeamsError::WrongMeasure(_))));
        assert!(matches!(theta_weight(&c, &cont), Err(TeamsError::InvalidArgument(_))));
    }
}
