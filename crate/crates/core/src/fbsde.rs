//! Stochastic maximum principle for continuous-time teams under the original
//! measure.
//!
//! The adjoint `ψ` is computed backward by least-squares regression. At node
//! `j` the per-path target is
//!
//! ```text
//! λ̃_j = w_j ℓ_x + (I + Δt f_x)ᵀ ψ̂_{j+1} + Δt ∂_x tr(q̃₂₂ᵀσ) + Δt Σᵢ hⁱ_xᵀ q₁₁ⁱ + π_xᵀ H_u
//! ```
//!
//! where the last term routes the Hamiltonian gradient back through policies
//! that read the state. `q̃₂₂` is the regression of `ψ̂_{j+1} ΔWᵀ/Δt` and `q₁₁ⁱ`
//! the regression of the cost-to-go paired with `ΔBⁱ`, mapped to observation
//! units. Both exist only as per-node predictors.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeamsError};
use crate::girsanov::payoff_original;
use crate::linalg::Mat;
use crate::numerics::Estimate;
use crate::pbp::{sweep_seed, SolveTrace, SweepRecord};
use crate::policy::{Policy, PolicyProfile};
use crate::problem::{
    CompiledInformation, DiffusionField, FeatureSource, Flavor, ScalarField, TeamProblem, VectorField,
};
use crate::reduction::{csv_err, fit, Predictor, RegressionSpec};
use crate::simulate::{feature_table, problem_grid, simulate_range, Measure, PathEnsemble};

const EXPLODING: f64 = 1e6;

fn continuous_parts(problem: &TeamProblem) -> Result<&crate::problem::DiffusionFamily> {
    match &problem.flavor {
        Flavor::ContinuousTime { diffusion, .. } => Ok(diffusion),
        Flavor::DiscreteTime { .. } => {
            Err(TeamsError::InvalidArgument("the maximum principle engine needs a continuous-time problem".into()))
        }
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(TeamsError::ShapeMismatch(format!("{what}: expected {want}, got {got}")));
    }
    Ok(())
}

fn check_hamiltonian_args(problem: &TeamProblem, x: &[f64], psi: &[f64], q11: &[Vec<f64>], q22: &Mat, u: &[f64]) -> Result<()> {
    let n = problem.state_dim;
    check_len("state", x.len(), n)?;
    check_len("adjoint", psi.len(), n)?;
    check_len("joint action", u.len(), problem.joint_action_dim())?;
    check_len("observation intensities", q11.len(), problem.dm_count())?;
    for (q, k) in q11.iter().zip(problem.obs_dims()) {
        check_len("observation intensity", q.len(), k)?;
    }
    if q22.rows() != n || q22.cols() != problem.noise_dim() {
        return Err(TeamsError::ShapeMismatch(format!(
            "diffusion intensity: expected {n}×{}, got {}×{}",
            problem.noise_dim(),
            q22.rows(),
            q22.cols()
        )));
    }
    Ok(())
}

/// `H = ⟨f, ψ⟩ + ℓ + tr(q̃₂₂ᵀσ) + Σᵢ ⟨q₁₁ⁱ, hⁱ⟩`.
pub fn hamiltonian(
    problem: &TeamProblem,
    t: f64,
    x: &[f64],
    psi: &[f64],
    q11: &[Vec<f64>],
    q22: &Mat,
    u: &[f64],
) -> Result<f64> {
    let diffusion = continuous_parts(problem)?;
    check_hamiltonian_args(problem, x, psi, q11, q22, u)?;
    let n = problem.state_dim;
    let mut f = vec![0.0; n];
    problem.drift.eval(t, x, u, &mut f);
    let mut value = problem.running_cost.eval(t, x, u) + f.iter().zip(psi).map(|(a, b)| a * b).sum::<f64>();
    let mut sigma = Mat::zeros(n, problem.noise_dim());
    diffusion.eval(t, x, u, &mut sigma);
    value += sigma.as_slice().iter().zip(q22.as_slice()).map(|(a, b)| a * b).sum::<f64>();
    for (dm, q) in problem.dms.iter().zip(q11) {
        let mut h = vec![0.0; q.len()];
        dm.observation.eval(t, x, u, &mut h);
        value += h.iter().zip(q).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(value)
}

/// Gradient of [`hamiltonian`] with respect to the joint action.
pub fn hamiltonian_grad_u(
    problem: &TeamProblem,
    t: f64,
    x: &[f64],
    psi: &[f64],
    q11: &[Vec<f64>],
    q22: &Mat,
    u: &[f64],
    out: &mut [f64],
) -> Result<()> {
    let diffusion = continuous_parts(problem)?;
    check_hamiltonian_args(problem, x, psi, q11, q22, u)?;
    check_len("gradient", out.len(), u.len())?;
    let mut ham = HamiltonianTerms::new(problem, diffusion);
    ham.grad_u(t, x, u, psi, q11, Some(q22), 1.0, out);
    Ok(())
}

/// Scratch space for Hamiltonian derivatives.
struct HamiltonianTerms<'a> {
    problem: &'a TeamProblem,
    diffusion: &'a crate::problem::DiffusionFamily,
    fu: Mat,
    fx: Mat,
    tmp_u: Vec<f64>,
    tmp_x: Vec<f64>,
}

impl<'a> HamiltonianTerms<'a> {
    fn new(problem: &'a TeamProblem, diffusion: &'a crate::problem::DiffusionFamily) -> Self {
        let n = problem.state_dim;
        let du = problem.joint_action_dim();
        HamiltonianTerms {
            problem,
            diffusion,
            fu: Mat::zeros(n, du),
            fx: Mat::zeros(n, n),
            tmp_u: vec![0.0; du],
            tmp_x: vec![0.0; n],
        }
    }

    /// `out = w ℓ_u + s (f_uᵀψ + ∂_u tr(q₂₂ᵀσ) + Σ hᵢ_uᵀ q₁₁ⁱ)`.
    #[allow(clippy::too_many_arguments)]
    fn grad_u(&mut self, t: f64, x: &[f64], u: &[f64], psi: &[f64], q11: &[Vec<f64>], q22: Option<&Mat>, s: f64, out: &mut [f64]) {
        self.grad_u_weighted(t, x, u, psi, q11, q22, s, s, out);
    }

    #[allow(clippy::too_many_arguments)]
    fn grad_u_weighted(
        &mut self,
        t: f64,
        x: &[f64],
        u: &[f64],
        psi: &[f64],
        q11: &[Vec<f64>],
        q22: Option<&Mat>,
        w: f64,
        s: f64,
        out: &mut [f64],
    ) {
        let pr = self.problem;
        let du = out.len();
        pr.running_cost.grad_u(t, x, u, &mut self.tmp_u);
        for c in 0..du {
            out[c] = w * self.tmp_u[c];
        }
        if s == 0.0 {
            return;
        }
        pr.drift.jac_u(t, x, u, &mut self.fu);
        self.fu.tr_mul_vec_add(&psi.iter().map(|v| s * v).collect::<Vec<_>>(), out);
        if let Some(q) = q22 {
            let mut gx = vec![0.0; x.len()];
            let mut gu = vec![0.0; du];
            self.diffusion.trace_grad(t, x, u, q, &mut gx, &mut gu);
            for c in 0..du {
                out[c] += s * gu[c];
            }
        }
        for (dm, q) in pr.dms.iter().zip(q11) {
            if q.is_empty() || q.iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut hu = Mat::zeros(q.len(), du);
            dm.observation.jac_u(t, x, u, &mut hu);
            hu.tr_mul_vec_add(&q.iter().map(|v| s * v).collect::<Vec<_>>(), out);
        }
    }

    /// `out += w ℓ_x + s (f_xᵀψ + ∂_x tr(q₂₂ᵀσ) + Σ hᵢ_xᵀ q₁₁ⁱ)`.
    #[allow(clippy::too_many_arguments)]
    fn add_grad_x(
        &mut self,
        t: f64,
        x: &[f64],
        u: &[f64],
        psi: &[f64],
        q11: &[Vec<f64>],
        q22: Option<&Mat>,
        w: f64,
        s: f64,
        out: &mut [f64],
    ) {
        let pr = self.problem;
        let n = out.len();
        pr.running_cost.grad_x(t, x, u, &mut self.tmp_x);
        for c in 0..n {
            out[c] += w * self.tmp_x[c];
        }
        pr.drift.jac_x(t, x, u, &mut self.fx);
        self.fx.tr_mul_vec_add(&psi.iter().map(|v| s * v).collect::<Vec<_>>(), out);
        if let Some(q) = q22 {
            let mut gx = vec![0.0; n];
            let mut gu = vec![0.0; u.len()];
            self.diffusion.trace_grad(t, x, u, q, &mut gx, &mut gu);
            for c in 0..n {
                out[c] += s * gx[c];
            }
        }
        for (dm, q) in pr.dms.iter().zip(q11) {
            if q.is_empty() || q.iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut hx = Mat::zeros(q.len(), n);
            dm.observation.jac_x(t, x, u, &mut hx);
            hx.tr_mul_vec_add(&q.iter().map(|v| s * v).collect::<Vec<_>>(), out);
        }
    }
}

/// Backward solution of the adjoint equations on one ensemble.
#[derive(Debug, Clone)]
pub struct AdjointEnsemble {
    pub n_paths: usize,
    pub nodes: usize,
    pub state_dim: usize,
    pub joint_dim: usize,
    /// `psi[(p * nodes + j) * n + c]`.
    pub psi: Vec<f64>,
    /// Conditional cost-to-go `Ψ₁` per path and node.
    pub psi1: Vec<f64>,
    /// Per-unit-time `H_u` per path and node (`ℓ_u` alone at the last node).
    pub hamiltonian_u: Vec<f64>,
    /// Node-weighted `H_u`: the contribution of each decision to the payoff gradient.
    pub weighted_u: Vec<f64>,
    /// Regression features per node (`n_paths × feature_dims[j]`).
    pub features: Vec<Vec<f64>>,
    pub feature_dims: Vec<usize>,
    /// `q̃₂₂` predictor per step (flattened `n × m`), absent when `σ` is constant.
    pub q22: Vec<Option<Predictor>>,
    /// `q₁₁ⁱ` predictor per step and DM, absent when `hⁱ` depends on neither state nor action.
    pub q11: Vec<Vec<Option<Predictor>>>,
}

impl AdjointEnsemble {
    pub fn psi_at(&self, p: usize, j: usize) -> &[f64] {
        let o = (p * self.nodes + j) * self.state_dim;
        &self.psi[o..o + self.state_dim]
    }

    pub fn hamiltonian_u_at(&self, p: usize, j: usize) -> &[f64] {
        let o = (p * self.nodes + j) * self.joint_dim;
        &self.hamiltonian_u[o..o + self.joint_dim]
    }

    pub fn weighted_u_at(&self, p: usize, j: usize) -> &[f64] {
        let o = (p * self.nodes + j) * self.joint_dim;
        &self.weighted_u[o..o + self.joint_dim]
    }

    fn feature(&self, p: usize, j: usize) -> &[f64] {
        let d = self.feature_dims[j];
        &self.features[j][p * d..(p + 1) * d]
    }

    /// `q̃₂₂` on path `p` over step `j` (zero when not fitted).
    pub fn q22_at(&self, p: usize, j: usize, rows: usize, cols: usize) -> Mat {
        let mut q = Mat::zeros(rows, cols);
        if let Some(pred) = &self.q22[j] {
            pred.predict(self.feature(p, j), q.as_mut_slice());
        }
        q
    }

    /// `q₁₁ⁱ` for every DM on path `p` over step `j`.
    pub fn q11_at(&self, p: usize, j: usize, obs_dims: &[usize]) -> Vec<Vec<f64>> {
        obs_dims
            .iter()
            .enumerate()
            .map(|(i, &k)| {
                let mut q = vec![0.0; k];
                if let Some(pred) = &self.q11[j][i] {
                    pred.predict(self.feature(p, j), &mut q);
                }
                q
            })
            .collect()
    }
}

/// Regression features at every node: the state plus every distinct
/// observation or past-state coordinate any policy reads there.
fn adjoint_features(problem: &TeamProblem, profile: &PolicyProfile, ensemble: &PathEnsemble) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let grid = ensemble.grid;
    let n = problem.state_dim;
    let kd = problem.obs_dims();
    let info = problem
        .dms
        .iter()
        .enumerate()
        .map(|(i, dm)| CompiledInformation::compile(&dm.information, i, &grid, &kd, n))
        .collect::<Result<Vec<_>>>()?;
    let mut features = Vec::with_capacity(grid.nodes());
    let mut dims = Vec::with_capacity(grid.nodes());
    for j in 0..grid.nodes() {
        let mut extra: Vec<FeatureSource> = Vec::new();
        for (ci, pol) in info.iter().zip(&profile.per_dm) {
            for s in ci.feature_sources(j, pol.recent()) {
                let keep = match s {
                    FeatureSource::Padding => false,
                    FeatureSource::State { node, .. } => node != j,
                    FeatureSource::Observation { .. } => true,
                };
                if keep && !extra.contains(&s) {
                    extra.push(s);
                }
            }
        }
        let dim = n + extra.len();
        let data: Vec<f64> = (0..ensemble.n_paths)
            .into_par_iter()
            .flat_map_iter(|p| {
                let mut row = ensemble.state(p, j).to_vec();
                row.extend(extra.iter().map(|s| match *s {
                    FeatureSource::State { node, coord } => ensemble.state(p, node)[coord],
                    FeatureSource::Observation { dm, node, coord } => ensemble.observation(dm, p, node)[coord],
                    FeatureSource::Padding => 0.0,
                }));
                row
            })
            .collect();
        features.push(data);
        dims.push(dim);
    }
    Ok((features, dims))
}

/// Per-path quantities produced at one backward node.
struct NodeOut {
    target: Vec<f64>,
    rate_u: Vec<f64>,
    weighted_u: Vec<f64>,
    /// `(node, coord, value)` additions to the state targets of earlier nodes.
    feedback: Vec<(usize, usize, f64)>,
}

/// Solves the adjoint equations backward on an original-measure ensemble
/// simulated with `profile`.
pub fn bsde_solve(problem: &TeamProblem, profile: &PolicyProfile, ensemble: &PathEnsemble, reg: &RegressionSpec) -> Result<AdjointEnsemble> {
    let diffusion = continuous_parts(problem)?;
    if ensemble.measure != Measure::Original || ensemble.discrete {
        return Err(TeamsError::WrongMeasure("the adjoint is solved on original-measure continuous paths".into()));
    }
    profile.check(problem)?;
    reg.check()?;
    let grid = ensemble.grid;
    let nodes = grid.nodes();
    let steps = grid.steps();
    let dt = grid.dt();
    let n_paths = ensemble.n_paths;
    let n = problem.state_dim;
    let m = ensemble.noise_dim;
    let kd = problem.obs_dims();
    let dd = problem.action_dims();
    let offs = problem.action_offsets();
    let du = problem.joint_action_dim();

    let need_q22 = !diffusion.is_constant() && m > 0;
    let need_q11: Vec<bool> = problem
        .dms
        .iter()
        .zip(&kd)
        .map(|(d, &k)| {
            let s = d.observation.structure();
            k > 0 && (s.uses_state || s.uses_actions)
        })
        .collect();
    if (need_q22 || need_q11.iter().any(|b| *b)) && ensemble.increments.is_none() {
        return Err(TeamsError::MissingIncrements);
    }
    let inv_sqrt_t: Vec<Mat> = problem.factors()?.noise.iter().map(|f| f.inv_sqrt.transpose()).collect();

    let (features, feature_dims) = adjoint_features(problem, profile, ensemble)?;
    let info = problem
        .dms
        .iter()
        .enumerate()
        .map(|(i, dm)| CompiledInformation::compile(&dm.information, i, &grid, &kd, n))
        .collect::<Result<Vec<_>>>()?;

    let mut psi = vec![0.0; n_paths * nodes * n];
    let mut psi1 = vec![0.0; n_paths * nodes];
    let mut rate_u = vec![0.0; n_paths * nodes * du];
    let mut weighted_u = vec![0.0; n_paths * nodes * du];
    // carry[p*n + c]: the state sensitivity entering the step that ends at the
    // current node; carry1[p]: the matching cost-to-go.
    let mut carry = vec![0.0; n_paths * n];
    let mut carry1 = vec![0.0; n_paths];
    // Feedback terms waiting to be added to the state target of a node.
    let mut pending = vec![0.0; n_paths * nodes * n];
    let mut q22_preds: Vec<Option<Predictor>> = vec![None; steps];
    let mut q11_preds: Vec<Vec<Option<Predictor>>> = vec![vec![None; kd.len()]; steps];

    let zero_q11: Vec<Vec<f64>> = kd.iter().map(|k| vec![0.0; *k]).collect();

    for j in (0..nodes).rev() {
        let t = grid.time(j);
        let w = grid.trapezoid(j);
        let fdim = feature_dims[j];
        let fj = &features[j];

        // Intensity surrogates over step j.
        let mut q22_pred = None;
        let mut q11_pred: Vec<Option<Predictor>> = vec![None; kd.len()];
        if j < steps && (need_q22 || need_q11.iter().any(|b| *b)) {
            // Subtracting an F_j-measurable baseline leaves E[· ΔBᵀ | F_j]
            // unchanged and removes most of the variance.
            let base_targets: Vec<f64> =
                (0..n_paths).flat_map(|p| carry[p * n..(p + 1) * n].iter().copied().chain([carry1[p]])).collect();
            let base = fit(fj, fdim, &base_targets, n + 1, reg)?;
            let resid: Vec<Vec<f64>> = (0..n_paths)
                .into_par_iter()
                .map(|p| {
                    let mut b = vec![0.0; n + 1];
                    base.predict(&fj[p * fdim..(p + 1) * fdim], &mut b);
                    let mut r: Vec<f64> = carry[p * n..(p + 1) * n].iter().zip(&b).map(|(a, c)| a - c).collect();
                    r.push(carry1[p] - b[n]);
                    r
                })
                .collect();
            if need_q22 {
                let targets: Vec<f64> = (0..n_paths)
                    .flat_map(|p| {
                        let dw = ensemble.state_noise(p, j).unwrap();
                        let r = &resid[p];
                        (0..n).flat_map(move |a| (0..m).map(move |b| r[a] * dw[b] / dt))
                    })
                    .collect();
                q22_pred = Some(fit(fj, fdim, &targets, n * m, reg)?);
            }
            for (i, &k) in kd.iter().enumerate() {
                if !need_q11[i] {
                    continue;
                }
                let targets: Vec<f64> = (0..n_paths)
                    .flat_map(|p| {
                        let db = ensemble.obs_noise(i, p, j).unwrap();
                        let scaled: Vec<f64> = db.iter().map(|v| resid[p][n] * v / dt).collect();
                        inv_sqrt_t[i].mul_vec(&scaled)
                    })
                    .collect();
                q11_pred[i] = Some(fit(fj, fdim, &targets, k, reg)?);
            }
        }

        let outs: Vec<NodeOut> = (0..n_paths)
            .into_par_iter()
            .map(|p| {
                let mut ham = HamiltonianTerms::new(problem, diffusion);
                let x = ensemble.state(p, j);
                let mut u = Vec::with_capacity(du);
                ensemble.joint_action(p, j, &mut u);
                let z = &fj[p * fdim..(p + 1) * fdim];
                let next = &carry[p * n..(p + 1) * n];
                let q22 = q22_pred.as_ref().map(|pr: &Predictor| {
                    let mut q = Mat::zeros(n, m);
                    pr.predict(z, q.as_mut_slice());
                    q
                });
                let q11: Vec<Vec<f64>> = if j < steps {
                    kd.iter()
                        .enumerate()
                        .map(|(i, &k)| {
                            let mut q = vec![0.0; k];
                            if let Some(pr) = &q11_pred[i] {
                                pr.predict(z, &mut q);
                            }
                            q
                        })
                        .collect()
                } else {
                    zero_q11.clone()
                };
                let s = if j < steps { dt } else { 0.0 };

                let mut weighted = vec![0.0; du];
                ham.grad_u_weighted(t, x, &u, next, &q11, q22.as_ref(), w, s, &mut weighted);
                let mut rate = vec![0.0; du];
                ham.grad_u_weighted(t, x, &u, next, &q11, q22.as_ref(), 1.0, if j < steps { 1.0 } else { 0.0 }, &mut rate);

                let mut target = vec![0.0; n];
                if j < steps {
                    target.copy_from_slice(next);
                    ham.add_grad_x(t, x, &u, next, &q11, q22.as_ref(), w, dt, &mut target);
                } else {
                    // Terminal node: ψ(T) = φ_x exactly; running-cost and feedback
                    // terms at T enter the step before it.
                    problem.terminal_cost.grad_x(t, x, &[], &mut target);
                }

                // Policies reading the state pass H_u back to those state coordinates.
                let mut feedback = Vec::new();
                let hist = ensemble.path(p);
                let mut zf = Vec::new();
                let mut out = Vec::new();
                let mut pinned = Vec::new();
                let mut phi = Vec::new();
                let mut dz = Mat::zeros(1, 1);
                for (i, pol) in profile.per_dm.iter().enumerate() {
                    let Policy::Regular(r) = pol else { continue };
                    let srcs = info[i].feature_sources(j, r.recent);
                    if !srcs.iter().any(|s| matches!(s, FeatureSource::State { .. })) {
                        continue;
                    }
                    info[i].policy_features(j, r.recent, &hist, &mut zf);
                    let d = dd[i];
                    out.resize(d, 0.0);
                    pinned.resize(d, false);
                    r.act_with_sensitivity(t, &zf, &problem.dms[i].action, &mut out, &mut pinned, &mut phi, &mut dz);
                    let g = &weighted[offs[i]..offs[i] + d];
                    for (pos, src) in srcs.iter().enumerate() {
                        if let FeatureSource::State { node, coord } = *src {
                            let v: f64 = (0..d).map(|c| dz[(c, pos)] * g[c]).sum();
                            if v != 0.0 {
                                feedback.push((node, coord, v));
                            }
                        }
                    }
                }
                NodeOut { target, rate_u: rate, weighted_u: weighted, feedback }
            })
            .collect();

        for (p, o) in outs.iter().enumerate() {
            for &(node, coord, v) in &o.feedback {
                pending[(p * nodes + node) * n + coord] += v;
            }
            let a = (p * nodes + j) * du;
            rate_u[a..a + du].copy_from_slice(&o.rate_u);
            weighted_u[a..a + du].copy_from_slice(&o.weighted_u);
        }

        if j == steps {
            let mut tmp = vec![0.0; n];
            for (p, o) in outs.iter().enumerate() {
                let x = ensemble.state(p, j);
                let mut u = Vec::new();
                ensemble.joint_action(p, j, &mut u);
                psi[(p * nodes + j) * n..(p * nodes + j + 1) * n].copy_from_slice(&o.target);
                let phi = problem.terminal_cost.eval(t, x, &[]);
                psi1[p * nodes + j] = phi;
                problem.running_cost.grad_x(t, x, &u, &mut tmp);
                for c in 0..n {
                    carry[p * n + c] = o.target[c] + w * tmp[c] + pending[(p * nodes + j) * n + c];
                }
                carry1[p] = phi + w * problem.running_cost.eval(t, x, &u);
            }
        } else {
            let targets: Vec<f64> = outs
                .iter()
                .enumerate()
                .flat_map(|(p, o)| {
                    let x = ensemble.state(p, j);
                    let mut u = Vec::new();
                    ensemble.joint_action(p, j, &mut u);
                    let pend = &pending[(p * nodes + j) * n..(p * nodes + j + 1) * n];
                    let cost = carry1[p] + w * problem.running_cost.eval(t, x, &u);
                    o.target.iter().zip(pend).map(|(a, b)| a + b).chain([cost]).collect::<Vec<_>>()
                })
                .collect();
            let pred = fit(fj, fdim, &targets, n + 1, reg)?;
            let mut vals = vec![0.0; n + 1];
            for p in 0..n_paths {
                pred.predict(&fj[p * fdim..(p + 1) * fdim], &mut vals);
                if vals.iter().any(|v| !v.is_finite() || v.abs() > EXPLODING) {
                    return Err(TeamsError::ExplodingAdjoint { node: j });
                }
                psi[(p * nodes + j) * n..(p * nodes + j + 1) * n].copy_from_slice(&vals[..n]);
                psi1[p * nodes + j] = vals[n];
                carry[p * n..(p + 1) * n].copy_from_slice(&vals[..n]);
                carry1[p] = vals[n];
            }
            q22_preds[j] = q22_pred;
            q11_preds[j] = q11_pred;
        }
    }
    Ok(AdjointEnsemble {
        n_paths,
        nodes,
        state_dim: n,
        joint_dim: du,
        psi,
        psi1,
        hamiltonian_u: rate_u,
        weighted_u,
        features,
        feature_dims,
        q22: q22_preds,
        q11: q11_preds,
    })
}

/// Per (DM, node) size of the conditional Hamiltonian gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HamiltonianReport {
    /// `residual[dm][j]` for the nodes `j < M`.
    pub residual: Vec<Vec<f64>>,
    pub noise_floor: Vec<Vec<f64>>,
    pub max_residual: f64,
}

impl HamiltonianReport {
    pub fn max_noise_floor(&self) -> f64 {
        self.noise_floor.iter().flatten().cloned().fold(0.0, f64::max)
    }

    /// Columns `dm,node,residual`.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["dm", "node", "residual"]).map_err(csv_err)?;
        for (i, row) in self.residual.iter().enumerate() {
            for (j, r) in row.iter().enumerate() {
                out.write_record([i.to_string(), j.to_string(), format!("{r:e}")]).map_err(csv_err)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Regresses each DM's `H_u` on its own information and reports the mean norm
/// of the feasible part of the conditional gradient.
pub fn conditional_hamiltonian_residual(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    ensemble: &PathEnsemble,
    adjoint: &AdjointEnsemble,
    reg: &RegressionSpec,
) -> Result<HamiltonianReport> {
    if adjoint.n_paths != ensemble.n_paths || adjoint.nodes != ensemble.nodes() {
        return Err(TeamsError::ShapeMismatch("adjoint and ensemble differ in size".into()));
    }
    let steps = ensemble.grid.steps();
    let offs = problem.action_offsets();
    let n_paths = ensemble.n_paths;
    let mut residual = Vec::new();
    let mut floor = Vec::new();
    for (i, dm) in problem.dms.iter().enumerate() {
        let ft = feature_table(problem, i, profile.per_dm[i].recent(), ensemble)?;
        let d = dm.action.dim;
        let cells: Vec<(f64, f64)> = (0..steps)
            .into_par_iter()
            .map(|j| {
                let (feats, dim) = if ft.dim == 0 { (vec![1.0; n_paths], 1) } else { (ft.node(j), ft.dim) };
                let targets: Vec<f64> =
                    (0..n_paths).flat_map(|p| adjoint.hamiltonian_u_at(p, j)[offs[i]..offs[i] + d].to_vec()).collect();
                let pred = fit(&feats, dim, &targets, d, reg)?;
                let mut g = vec![0.0; d];
                let total: f64 = (0..n_paths)
                    .map(|p| {
                        pred.predict(&feats[p * dim..(p + 1) * dim], &mut g);
                        dm.action.project_gradient(ensemble.action(i, p, j), &mut g);
                        g.iter().map(|v| v * v).sum::<f64>().sqrt()
                    })
                    .sum();
                let nf = pred.noise_floor().iter().map(|v| v * v).sum::<f64>().sqrt();
                Ok((total / n_paths as f64, nf))
            })
            .collect::<Result<Vec<_>>>()?;
        residual.push(cells.iter().map(|c| c.0).collect::<Vec<_>>());
        floor.push(cells.iter().map(|c| c.1).collect::<Vec<_>>());
    }
    let max_residual = residual.iter().flatten().cloned().fold(0.0, f64::max);
    Ok(HamiltonianReport { residual, noise_floor: floor, max_residual })
}

/// Simulates, solves the adjoint and returns the conditional Hamiltonian report.
pub fn hamiltonian_report(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    reg: &RegressionSpec,
    n_paths: usize,
    seed: u64,
    dt: f64,
) -> Result<HamiltonianReport> {
    let ens = simulate_range(problem, profile, problem_grid(problem, dt)?, n_paths, seed, Measure::Original, 0)?;
    let adj = bsde_solve(problem, profile, &ens, reg)?;
    conditional_hamiltonian_residual(problem, profile, &ens, &adj, reg)
}

pub fn hamiltonian_max_residual(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    reg: &RegressionSpec,
    n_paths: usize,
    seed: u64,
    dt: f64,
) -> Result<f64> {
    Ok(hamiltonian_report(problem, profile, reg, n_paths, seed, dt)?.max_residual)
}

/// Payoff gradient with respect to each DM's policy parameters, obtained by
/// pushing the node-weighted `H_u` through the policies, together with a
/// Gauss–Newton curvature block `E Σ_j w_j Φ_jᵀ ℓ_uu Φ_j` per DM.
#[derive(Debug, Clone)]
pub struct ChainRuleGradient {
    pub grad: Vec<Vec<Estimate>>,
    pub gauss_newton: Vec<nalgebra::DMatrix<f64>>,
}

impl ChainRuleGradient {
    pub fn means(&self, dm: usize) -> Vec<f64> {
        self.grad[dm].iter().map(|e| e.value).collect()
    }
}

pub fn chain_rule_gradient(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    ensemble: &PathEnsemble,
    adjoint: &AdjointEnsemble,
) -> Result<ChainRuleGradient> {
    let grid = ensemble.grid;
    let nodes = grid.nodes();
    let n = problem.state_dim;
    let kd = problem.obs_dims();
    let dd = problem.action_dims();
    let offs = problem.action_offsets();
    let du = problem.joint_action_dim();
    let info = problem
        .dms
        .iter()
        .enumerate()
        .map(|(i, dm)| CompiledInformation::compile(&dm.information, i, &grid, &kd, n))
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = profile.per_dm.iter().map(|p| p.as_regular().map_or(0, |r| r.n_params())).collect();

    struct PathOut {
        grad: Vec<Vec<f64>>,
        gn: Vec<Vec<f64>>,
    }
    let per_path: Vec<PathOut> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|p| {
            let hist = ensemble.path(p);
            let mut grad: Vec<Vec<f64>> = sizes.iter().map(|k| vec![0.0; *k]).collect();
            let mut gn: Vec<Vec<f64>> = sizes.iter().map(|k| vec![0.0; k * k]).collect();
            let mut z = Vec::new();
            let mut phi = Vec::new();
            let mut dz = Mat::zeros(1, 1);
            let mut u = Vec::with_capacity(du);
            let mut gp = vec![0.0; du];
            let mut gm = vec![0.0; du];
            for j in 0..nodes {
                let t = grid.time(j);
                let w = grid.trapezoid(j);
                let x = ensemble.state(p, j);
                ensemble.joint_action(p, j, &mut u);
                let hu = adjoint.weighted_u_at(p, j);
                for (i, pol) in profile.per_dm.iter().enumerate() {
                    let Policy::Regular(r) = pol else { continue };
                    let d = dd[i];
                    info[i].policy_features(j, r.recent, &hist, &mut z);
                    let mut out = vec![0.0; d];
                    let mut pinned = vec![false; d];
                    let seg = r.act_with_sensitivity(t, &z, &problem.dms[i].action, &mut out, &mut pinned, &mut phi, &mut dz);
                    let kb = phi.len();
                    let base = r.segment_offset(seg);
                    // ℓ_uu block of DM i by central differences.
                    let mut luu = vec![0.0; d * d];
                    let mut uu = u.clone();
                    for c in 0..d {
                        let a = offs[i] + c;
                        let h = 1e-5 * (1.0 + u[a].abs());
                        uu[a] = u[a] + h;
                        problem.running_cost.grad_u(t, x, &uu, &mut gp);
                        uu[a] = u[a] - h;
                        problem.running_cost.grad_u(t, x, &uu, &mut gm);
                        uu[a] = u[a];
                        for r2 in 0..d {
                            luu[r2 * d + c] = (gp[offs[i] + r2] - gm[offs[i] + r2]) / (2.0 * h);
                        }
                    }
                    let k_all = sizes[i];
                    for c in 0..d {
                        if pinned[c] {
                            continue;
                        }
                        for (b, ph) in phi.iter().enumerate() {
                            grad[i][base + c * kb + b] += hu[offs[i] + c] * ph;
                        }
                        for c2 in 0..d {
                            if pinned[c2] {
                                continue;
                            }
                            let l = w * 0.5 * (luu[c * d + c2] + luu[c2 * d + c]);
                            if l == 0.0 {
                                continue;
                            }
                            for (b, ph) in phi.iter().enumerate() {
                                for (b2, ph2) in phi.iter().enumerate() {
                                    gn[i][(base + c * kb + b) * k_all + base + c2 * kb + b2] += l * ph * ph2;
                                }
                            }
                        }
                    }
                }
            }
            PathOut { grad, gn }
        })
        .collect();

    let np = ensemble.n_paths as f64;
    let mut grad = Vec::new();
    let mut gauss_newton = Vec::new();
    for (i, &k) in sizes.iter().enumerate() {
        grad.push(
            (0..k)
                .map(|c| Estimate::from_samples(&per_path.iter().map(|o| o.grad[i][c]).collect::<Vec<_>>()))
                .collect::<Vec<_>>(),
        );
        let mut g = nalgebra::DMatrix::<f64>::zeros(k, k);
        for o in &per_path {
            for a in 0..k {
                for b in 0..k {
                    g[(a, b)] += o.gn[i][a * k + b] / np;
                }
            }
        }
        gauss_newton.push(g);
    }
    if grad.iter().flatten().any(|e| !e.value.is_finite()) {
        return Err(TeamsError::NaNPayoff);
    }
    Ok(ChainRuleGradient { grad, gauss_newton })
}

/// Preconditioned descent direction `−(G + εI)⁻¹ g`; plain `−g` when the
/// curvature block vanishes.
fn preconditioned(g: &[f64], gn: &nalgebra::DMatrix<f64>) -> Vec<f64> {
    let k = g.len();
    let top = (0..k).map(|a| gn[(a, a)].abs()).fold(0.0, f64::max);
    if top == 0.0 {
        return g.iter().map(|v| -v).collect();
    }
    let rhs = nalgebra::DMatrix::from_column_slice(k, 1, g);
    let sol = crate::linalg::solve_spd(gn, &rhs, 1e-8 * top);
    sol.iter().map(|v| -v).collect()
}

/// Policy improvement by preconditioned descent along the conditional
/// Hamiltonian gradient.
///
/// Each step simulates `n_paths` original-measure paths with a fresh step seed,
/// solves the adjoint, and then for each DM in ascending order tries
/// `θ + α d` with `α = 1, ½, …` (at most 21 trials), keeping the first that
/// lowers the common-random-number payoff. Record `s` holds the payoff after
/// step `s` and the residual of the profile the step started from.
#[allow(clippy::too_many_arguments)]
pub fn mp_improve(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    steps: usize,
    reg: &RegressionSpec,
    n_paths: usize,
    seed: u64,
    dt: f64,
) -> Result<(PolicyProfile, SolveTrace)> {
    continuous_parts(problem)?;
    profile.check(problem)?;
    let grid = problem_grid(problem, dt)?;
    let n_dm = problem.dm_count();
    let mut trace = SolveTrace::new(n_dm);
    let mut current = profile.clone();
    for s in 0..steps {
        let step_seed = sweep_seed(seed, s);
        let ens = simulate_range(problem, &current, grid, n_paths, step_seed, Measure::Original, 0)?;
        let mut j0 = payoff_original(problem, &ens)?;
        let adj = bsde_solve(problem, &current, &ens, reg)?;
        let report = conditional_hamiltonian_residual(problem, &current, &ens, &adj, reg)?;
        let cg = chain_rule_gradient(problem, &current, &ens, &adj)?;
        drop(ens);
        let mut change = vec![0.0; n_dm];
        let mut failed = vec![false; n_dm];
        for i in 0..n_dm {
            let Policy::Regular(r) = &current.per_dm[i] else { continue };
            let g = cg.means(i);
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let dir = preconditioned(&g, &cg.gauss_newton[i]);
            let theta0 = r.params();
            let mut trial = current.clone();
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..=20 {
                let th: Vec<f64> = theta0.iter().zip(&dir).map(|(a, b)| a + alpha * b).collect();
                if let Policy::Regular(tr) = &mut trial.per_dm[i] {
                    tr.set_params(&th);
                }
                let e = simulate_range(problem, &trial, grid, n_paths, step_seed, Measure::Original, 0)?;
                let j = payoff_original(problem, &e)?;
                if j.value < j0.value {
                    current = trial;
                    j0 = j;
                    change[i] = alpha * dir.iter().map(|v| v * v).sum::<f64>().sqrt();
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                log::debug!("mp_improve step {s}: line search failed for DM {i}");
                failed[i] = true;
            }
        }
        trace.push(SweepRecord {
            sweep: s,
            payoff: j0.value,
            stderr: j0.stderr,
            max_residual: report.max_residual,
            n_paths,
            coef_change: change,
            line_search_failed: failed,
        })?;
    }
    Ok((current, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::builtin::{lq_feedback, lq_scalar, tanh_filter};
    use crate::policy::Basis;
    use crate::problem::ScalarFamily;

    fn no_intensity(problem: &TeamProblem) -> (Vec<Vec<f64>>, Mat) {
        let q11 = problem.obs_dims().iter().map(|k| vec![0.0; *k]).collect();
        (q11, Mat::zeros(problem.state_dim, problem.noise_dim()))
    }

    #[test]
    fn hamiltonian_adds_drift_pairing_to_cost() {
        let p = lq_scalar(2.0, 1.0, 2.0, 1.0, 1.0);
        let (q11, q22) = no_intensity(&p);
        let h = hamiltonian(&p, 0.0, &[1.0], &[3.0], &q11, &q22, &[0.0]).unwrap();
        assert!((h - 7.0).abs() < 1e-12);
        let h0 = hamiltonian(&p, 0.0, &[1.0], &[0.0], &q11, &q22, &[0.0]).unwrap();
        assert!((h0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hamiltonian_rejects_wrong_shapes() {
        let p = lq_scalar(-0.5, 1.0, 1.0, 1.0, 1.0);
        let (q11, q22) = no_intensity(&p);
        let err = hamiltonian(&p, 0.0, &[1.0, 2.0], &[0.0], &q11, &q22, &[0.0]);
        assert!(matches!(err, Err(TeamsError::ShapeMismatch(_))));
    }

    #[test]
    fn action_gradient_matches_finite_differences() {
        let p = tanh_filter();
        let q11 = vec![vec![0.4]];
        let q22 = Mat::scalar(-0.2);
        let (x, psi, u) = ([0.7], [1.3], [0.25]);
        let mut g = [0.0];
        hamiltonian_grad_u(&p, 0.3, &x, &psi, &q11, &q22, &u, &mut g).unwrap();
        let h = 1e-6;
        let fp = hamiltonian(&p, 0.3, &x, &psi, &q11, &q22, &[u[0] + h]).unwrap();
        let fm = hamiltonian(&p, 0.3, &x, &psi, &q11, &q22, &[u[0] - h]).unwrap();
        assert!((g[0] - (fp - fm) / (2.0 * h)).abs() < 1e-6);
    }

    /// No running cost, zero control, terminal cost `c·x`: the adjoint solves
    /// `ψ' = −a ψ`, `ψ(T) = c`.
    fn linear_terminal(a: f64, c: f64) -> TeamProblem {
        let mut p = lq_scalar(a, 1.0, 0.0, 0.0, 0.0);
        p.running_cost = ScalarFamily::zero();
        p.terminal_cost = ScalarFamily::state_quadratic(None, Some(vec![c]), 0.0);
        p
    }

    fn adjoint_at_start(p: &TeamProblem) -> Vec<f64> {
        let prof = PolicyProfile::zeros(p, Basis::Polynomial { degree: 1 }, 1, vec![]);
        let grid = problem_grid(p, 1e-2).unwrap();
        let ens = simulate_range(p, &prof, grid, 500, 3, Measure::Original, 0).unwrap();
        let adj = bsde_solve(p, &prof, &ens, &RegressionSpec::polynomial(1)).unwrap();
        (0..500).map(|k| adj.psi_at(k, 0)[0]).collect()
    }

    #[test]
    fn adjoint_is_constant_without_dynamics() {
        for v in adjoint_at_start(&linear_terminal(0.0, 2.5)) {
            assert!((v - 2.5).abs() < 1e-6);
        }
    }

    #[test]
    fn adjoint_decays_with_stable_drift() {
        for v in adjoint_at_start(&linear_terminal(-1.0, 1.0)) {
            // Explicit Euler gives (1 − Δt)^100 instead of e^{−1}.
            assert!((v - 0.99f64.powi(100)).abs() < 1e-6);
            assert!((v - (-1f64).exp()).abs() < 5e-3);
        }
    }

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

    #[test]
    fn lq_adjoint_tracks_riccati_solution() {
        let p = lq_scalar(-0.5, 1.0, 1.0, 1.0, 1.0);
        let k = riccati(-0.5, 1.0, 1.0, 1.0, 1.0, 50);
        let gains: Vec<f64> = k[..50].iter().map(|v| -v).collect();
        let prof = lq_feedback(&gains, 1.0);
        let grid = problem_grid(&p, 2e-2).unwrap();
        let n = 2000;
        let ens = simulate_range(&p, &prof, grid, n, 11, Measure::Original, 0).unwrap();
        let adj = bsde_solve(&p, &prof, &ens, &RegressionSpec::polynomial(2)).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..=50 {
            for path in 0..n {
                let kx = k[j] * ens.state(path, j)[0];
                num += (adj.psi_at(path, j)[0] - kx).powi(2);
                den += kx * kx;
            }
        }
        assert!((num / den).sqrt() < 0.05);
    }

    #[test]
    fn optimal_lq_policy_has_small_residual_and_gradient() {
        let p = lq_scalar(-0.5, 1.0, 1.0, 1.0, 1.0);
        let k = riccati(-0.5, 1.0, 1.0, 1.0, 1.0, 10);
        let gains: Vec<f64> = (0..10).map(|i| -0.5 * (k[i] + k[i + 1])).collect();
        let opt = lq_feedback(&gains, 1.0);
        let zero = PolicyProfile::zeros(&p, Basis::Polynomial { degree: 1 }, 1, opt_switches(&opt));
        let reg = RegressionSpec::polynomial(2);
        let r_opt = hamiltonian_report(&p, &opt, &reg, 2000, 5, 2e-2).unwrap();
        let r_zero = hamiltonian_report(&p, &zero, &reg, 2000, 5, 2e-2).unwrap();
        assert!(r_opt.max_residual < 0.2 * r_zero.max_residual, "{} vs {}", r_opt.max_residual, r_zero.max_residual);
    }

    fn opt_switches(profile: &PolicyProfile) -> Vec<f64> {
        match &profile.per_dm[0] {
            Policy::Regular(r) => r.switch_times.clone(),
            _ => unreachable!(),
        }
    }

    #[test]
    fn zero_steps_leave_profile_unchanged() {
        let p = lq_scalar(-0.5, 1.0, 1.0, 1.0, 1.0);
        let prof = lq_feedback(&[-0.3, -0.6], 1.0);
        let (out, trace) = mp_improve(&p, &prof, 0, &RegressionSpec::polynomial(1), 100, 0, 5e-2).unwrap();
        assert_eq!(out, prof);
        assert!(trace.records.is_empty());
    }

    #[test]
    fn improvement_shrinks_residual_from_zero() {
        let p = lq_scalar(-0.5, 1.0, 1.0, 1.0, 1.0);
        let zero = PolicyProfile::zeros(&p, Basis::Polynomial { degree: 1 }, 1, vec![0.5]);
        let (_, trace) = mp_improve(&p, &zero, 3, &RegressionSpec::polynomial(2), 1000, 2, 5e-2).unwrap();
        let first = &trace.records[0];
        let last = trace.records.last().unwrap();
        assert!(last.max_residual < 0.5 * first.max_residual, "{} then {}", first.max_residual, last.max_residual);
        assert!(first.coef_change[0] > 0.0);
    }

    #[test]
    fn discrete_problems_are_rejected() {
        let p = crate::builtin::radner(0.5, 1.0);
        let prof = PolicyProfile::zeros(&p, Basis::Polynomial { degree: 1 }, 1, vec![]);
        assert!(matches!(
            hamiltonian_report(&p, &prof, &RegressionSpec::polynomial(1), 10, 0, 1e-2),
            Err(TeamsError::InvalidArgument(_))
        ));
    }
}
