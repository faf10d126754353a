//! Reverse-mode sensitivities of the simulated path cost.
//!
//! Noise is held fixed and every policy stays a fixed function of its features,
//! so a change of `uⁱ(t_j)` propagates through the state, the observations and
//! every later decision that reads them (closed loop). Summed over paths this is
//! the exact gradient of the common-random-number payoff estimate.

use rayon::prelude::*;

use crate::error::{Result, TeamsError};
use crate::linalg::Mat;
use crate::numerics::Estimate;
use crate::policy::{Policy, PolicyProfile};
use crate::problem::{
    CompiledInformation, DiffusionField, FeatureSource, Flavor, ScalarField, TeamProblem, VectorField,
};
use crate::simulate::{Measure, PathEnsemble};

#[derive(Debug, Clone)]
pub struct PathwiseGradient {
    pub n_paths: usize,
    pub nodes: usize,
    pub joint_dim: usize,
    /// `action[(p * nodes + j) * joint_dim + c]`: derivative of the path cost
    /// with respect to joint action coordinate `c` at node `j`.
    pub action: Vec<f64>,
    /// Mean gradient with respect to each DM's policy parameters (empty for
    /// relaxed policies), with per-coordinate standard errors.
    pub params: Vec<Vec<Estimate>>,
}

impl PathwiseGradient {
    pub fn at(&self, p: usize, j: usize) -> &[f64] {
        let o = (p * self.nodes + j) * self.joint_dim;
        &self.action[o..o + self.joint_dim]
    }

    pub fn param_means(&self, dm: usize) -> Vec<f64> {
        self.params[dm].iter().map(|e| e.value).collect()
    }
}

struct PathOut {
    action: Vec<f64>,
    params: Vec<Vec<f64>>,
}

/// Runs the backward sweep on every path of an original-measure ensemble that
/// was generated with `profile`.
pub fn pathwise_gradient(problem: &TeamProblem, profile: &PolicyProfile, ensemble: &PathEnsemble) -> Result<PathwiseGradient> {
    if ensemble.measure != Measure::Original {
        return Err(TeamsError::WrongMeasure("pathwise sensitivities need an original-measure ensemble".into()));
    }
    profile.check(problem)?;
    let grid = ensemble.grid;
    let nodes = grid.nodes();
    let steps = grid.steps();
    let discrete = ensemble.discrete;
    let n = problem.state_dim;
    let m = ensemble.noise_dim;
    let kd = problem.obs_dims();
    let dd = problem.action_dims();
    let offs = problem.action_offsets();
    let du = problem.joint_action_dim();
    let dt = grid.dt();
    let diffusion = match &problem.flavor {
        Flavor::ContinuousTime { diffusion, .. } if !diffusion.is_constant() => {
            if ensemble.increments.is_none() {
                return Err(TeamsError::MissingIncrements);
            }
            Some(diffusion)
        }
        _ => None,
    };
    let info = problem
        .dms
        .iter()
        .enumerate()
        .map(|(i, dm)| CompiledInformation::compile(&dm.information, i, &grid, &kd, n))
        .collect::<Result<Vec<_>>>()?;
    let sources: Vec<Vec<Vec<FeatureSource>>> = info
        .iter()
        .zip(&profile.per_dm)
        .map(|(ci, pol)| (0..nodes).map(|j| ci.feature_sources(j, pol.recent())).collect())
        .collect();
    let n_params: Vec<usize> = profile
        .per_dm
        .iter()
        .map(|p| p.as_regular().map_or(0, |r| r.n_params()))
        .collect();

    let per_path: Vec<PathOut> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|p| {
            let hist = ensemble.path(p);
            let mut lam_x = vec![0.0; nodes * n];
            let mut lam_y: Vec<Vec<f64>> = kd.iter().map(|k| vec![0.0; nodes * k]).collect();
            let mut action = vec![0.0; nodes * du];
            let mut params: Vec<Vec<f64>> = n_params.iter().map(|k| vec![0.0; *k]).collect();
            let mut u = Vec::with_capacity(du);
            let mut u_prev = Vec::with_capacity(du);
            let mut tmp_u = vec![0.0; du];
            let mut tmp_x = vec![0.0; n];
            let mut fu = Mat::zeros(n, du);
            let mut fx = Mat::zeros(n, n);
            let mut z = Vec::new();
            let mut phi = Vec::new();
            let mut dz = Mat::zeros(1, 1);
            let mut q = Mat::zeros(n, m);
            for j in (0..nodes).rev() {
                let t = grid.time(j);
                let x = ensemble.state(p, j);
                ensemble.joint_action(p, j, &mut u);
                if !discrete && j < steps {
                    for (i, k) in kd.iter().enumerate() {
                        for c in 0..*k {
                            lam_y[i][j * k + c] += lam_y[i][(j + 1) * k + c];
                        }
                    }
                }
                let has_action = !discrete || j < steps;
                let w = if discrete { 1.0 } else { grid.trapezoid(j) };
                let dw = if j < steps && diffusion.is_some() { ensemble.state_noise(p, j) } else { None };
                if let Some(dw) = dw {
                    let lx1 = &lam_x[(j + 1) * n..(j + 2) * n];
                    for r in 0..n {
                        for c in 0..m {
                            q[(r, c)] = lx1[r] * dw[c];
                        }
                    }
                }
                let mut grad_sigma_x = vec![0.0; n];
                let mut grad_sigma_u = vec![0.0; du];
                if let (Some(sig), Some(_)) = (diffusion, dw) {
                    sig.trace_grad(t, x, &u, &q, &mut grad_sigma_x, &mut grad_sigma_u);
                }

                if has_action {
                    let mut lu = vec![0.0; du];
                    problem.running_cost.grad_u(t, x, &u, &mut tmp_u);
                    for c in 0..du {
                        lu[c] = w * tmp_u[c];
                    }
                    if j < steps {
                        let lx1 = &lam_x[(j + 1) * n..(j + 2) * n];
                        let scale = if discrete { 1.0 } else { dt };
                        problem.drift.jac_u(t, x, &u, &mut fu);
                        for c in 0..du {
                            let mut s = 0.0;
                            for r in 0..n {
                                s += fu[(r, c)] * lx1[r];
                            }
                            lu[c] += scale * s + grad_sigma_u[c];
                        }
                        // Observation maps that read u at this node.
                        let (ht, hx) = if discrete { (t + 1.0, ensemble.state(p, j + 1)) } else { (t, x) };
                        for (i, dm) in problem.dms.iter().enumerate() {
                            let k = kd[i];
                            let ly = &lam_y[i][(j + 1) * k..(j + 2) * k];
                            if ly.iter().all(|v| *v == 0.0) {
                                continue;
                            }
                            let mut hu = Mat::zeros(k, du);
                            dm.observation.jac_u(ht, hx, &u, &mut hu);
                            for c in 0..du {
                                let mut s = 0.0;
                                for r in 0..k {
                                    s += hu[(r, c)] * ly[r];
                                }
                                lu[c] += scale * s;
                            }
                        }
                    }
                    action[j * du..(j + 1) * du].copy_from_slice(&lu);

                    // Through each regular policy to its parameters and features.
                    for (i, pol) in profile.per_dm.iter().enumerate() {
                        let Policy::Regular(r) = pol else { continue };
                        let d = dd[i];
                        let lui = &lu[offs[i]..offs[i] + d];
                        info[i].policy_features(j, r.recent, &hist, &mut z);
                        let mut out = vec![0.0; d];
                        let mut pinned = vec![false; d];
                        let seg = r.act_with_sensitivity(t, &z, &problem.dms[i].action, &mut out, &mut pinned, &mut phi, &mut dz);
                        let kb = phi.len();
                        let base = r.segment_offset(seg);
                        for c in 0..d {
                            if pinned[c] {
                                continue;
                            }
                            for (b, ph) in phi.iter().enumerate() {
                                params[i][base + c * kb + b] += lui[c] * ph;
                            }
                        }
                        for (pos, src) in sources[i][j].iter().enumerate() {
                            let mut v = 0.0;
                            for c in 0..d {
                                v += dz[(c, pos)] * lui[c];
                            }
                            if v == 0.0 {
                                continue;
                            }
                            match *src {
                                FeatureSource::Padding => {}
                                FeatureSource::Observation { dm, node, coord } => lam_y[dm][node * kd[dm] + coord] += v,
                                FeatureSource::State { node, coord } => lam_x[node * n + coord] += v,
                            }
                        }
                    }
                }

                // State adjoint at node j.
                let mut acc = vec![0.0; n];
                if j == steps {
                    problem.terminal_cost.grad_x(t, x, &[], &mut tmp_x);
                    acc.copy_from_slice(&tmp_x);
                }
                if has_action {
                    problem.running_cost.grad_x(t, x, &u, &mut tmp_x);
                    for c in 0..n {
                        acc[c] += w * tmp_x[c];
                    }
                }
                if j < steps {
                    let lx1 = lam_x[(j + 1) * n..(j + 2) * n].to_vec();
                    problem.drift.jac_x(t, x, &u, &mut fx);
                    let scale = if discrete { 1.0 } else { dt };
                    for c in 0..n {
                        let mut s = 0.0;
                        for r in 0..n {
                            s += fx[(r, c)] * lx1[r];
                        }
                        acc[c] += scale * s + grad_sigma_x[c];
                        if !discrete {
                            acc[c] += lx1[c];
                        }
                    }
                }
                // Observation maps that read x at this node: y(j) in discrete
                // time, the increment y(j+1) - y(j) in continuous time.
                let (obs_node, scale) = if discrete { (Some(j), 1.0) } else { (if j < steps { Some(j + 1) } else { None }, dt) };
                if let Some(on) = obs_node {
                    if discrete {
                        u_prev.clear();
                        if j > 0 {
                            ensemble.joint_action(p, j - 1, &mut u_prev);
                        } else {
                            u_prev.resize(du, 0.0);
                        }
                    }
                    let uo = if discrete { &u_prev } else { &u };
                    for (i, dm) in problem.dms.iter().enumerate() {
                        let k = kd[i];
                        let ly = &lam_y[i][on * k..(on + 1) * k];
                        if ly.iter().all(|v| *v == 0.0) {
                            continue;
                        }
                        let mut hxm = Mat::zeros(k, n);
                        dm.observation.jac_x(t, x, uo, &mut hxm);
                        for c in 0..n {
                            let mut s = 0.0;
                            for r in 0..k {
                                s += hxm[(r, c)] * ly[r];
                            }
                            acc[c] += scale * s;
                        }
                    }
                }
                for c in 0..n {
                    lam_x[j * n + c] += acc[c];
                }
            }
            PathOut { action, params }
        })
        .collect();

    let n_paths = ensemble.n_paths;
    let params = n_params
        .iter()
        .enumerate()
        .map(|(i, &k)| {
            (0..k)
                .map(|c| {
                    let col: Vec<f64> = per_path.iter().map(|o| o.params[i][c]).collect();
                    Estimate::from_samples(&col)
                })
                .collect()
        })
        .collect();
    let mut action = Vec::with_capacity(n_paths * nodes * du);
    for o in &per_path {
        action.extend_from_slice(&o.action);
    }
    if action.iter().any(|v| !v.is_finite()) {
        return Err(TeamsError::NaNPayoff);
    }
    Ok(PathwiseGradient { n_paths, nodes, joint_dim: du, action, params })
}
