//! Θ-weighted path integrands of a discrete reference ensemble and the exact
//! effect of changing a single action.
//!
//! Under the reference measure states and observations are decision-free, so
//! changing `uᵏ(t)` on one path only touches `ℓ(t)`, the state factor of stage
//! `t+1` and the observation factors of stage `t+1`.

use rayon::prelude::*;

use crate::error::{Result, TeamsError};
use crate::girsanov::theta_weight;
use crate::linalg::{Mat, SpdFactors};
use crate::problem::{Flavor, ScalarField, TeamProblem, VectorField};
use crate::simulate::{path_costs, Measure, PathEnsemble};

pub struct StaticIntegrand<'a> {
    problem: &'a TeamProblem,
    pub ensemble: PathEnsemble,
    g_inv: Mat,
    noise: Vec<SpdFactors>,
    offsets: Vec<usize>,
    /// `log Θ_{0,T}` per path.
    pub log_theta: Vec<f64>,
    /// Path cost `Σ_{t<T} ℓ(t) + φ(x(T))`.
    pub cost: Vec<f64>,
    /// Shift applied before exponentiating (the largest initial log weight).
    pub shift: f64,
}

fn half_sq(z: &[f64]) -> f64 {
    0.5 * z.iter().map(|v| v * v).sum::<f64>()
}

impl<'a> StaticIntegrand<'a> {
    pub fn new(problem: &'a TeamProblem, ensemble: PathEnsemble) -> Result<Self> {
        let Flavor::DiscreteTime { gain, .. } = &problem.flavor else {
            return Err(TeamsError::InvalidArgument("the static reduction needs a discrete-time problem".into()));
        };
        if ensemble.measure != Measure::Reference || !ensemble.discrete {
            return Err(TeamsError::WrongMeasure("the static reduction runs on reference-measure paths".into()));
        }
        let (g_inv, _) = gain.inverse_and_logdet().ok_or(TeamsError::SingularGain { stage: 0 })?;
        let log_theta = theta_weight(problem, &ensemble)?.terminal_logs();
        let cost = path_costs(problem, &ensemble);
        let shift = log_theta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(StaticIntegrand {
            problem,
            g_inv,
            noise: problem.factors()?.noise,
            offsets: problem.action_offsets(),
            log_theta,
            cost,
            shift,
            ensemble,
        })
    }

    pub fn n_paths(&self) -> usize {
        self.ensemble.n_paths
    }

    pub fn stages(&self) -> usize {
        self.ensemble.grid.steps()
    }

    /// Shifted integrand `e^{log Θ − shift} · cost` on path `p`.
    pub fn value(&self, p: usize) -> f64 {
        (self.log_theta[p] - self.shift).exp() * self.cost[p]
    }

    /// Same with additive changes applied.
    pub fn value_with(&self, p: usize, dlog: f64, dcost: f64) -> f64 {
        (self.log_theta[p] + dlog - self.shift).exp() * (self.cost[p] + dcost)
    }

    /// Scale that turns shifted sums back into payoff units.
    pub fn unit(&self) -> f64 {
        self.shift.exp() / self.n_paths() as f64
    }

    /// Log-factor and cost terms of stage `t` that depend on `u(t)`.
    fn stage_terms(&self, p: usize, t: usize, u: &[f64]) -> (f64, f64) {
        let e = &self.ensemble;
        let pr = self.problem;
        let n = pr.state_dim;
        let x = e.state(p, t);
        let x1 = e.state(p, t + 1);
        let mut f = vec![0.0; n];
        pr.drift.eval(t as f64, x, u, &mut f);
        for c in 0..n {
            f[c] = x1[c] - f[c];
        }
        let r = self.g_inv.mul_vec(&f);
        let mut log = -half_sq(&r);
        for (i, dm) in pr.dms.iter().enumerate() {
            let k = e.obs_dims[i];
            let mut h = vec![0.0; k];
            dm.observation.eval((t + 1) as f64, x1, u, &mut h);
            let y = e.observation(i, p, t + 1);
            for c in 0..k {
                h[c] = y[c] - h[c];
            }
            log -= half_sq(&self.noise[i].inv_sqrt.mul_vec(&h));
        }
        (log, pr.running_cost.eval(t as f64, x, u))
    }

    /// Change of `(log Θ_{0,T}, cost)` on path `p` when DM `dm` plays `v` at stage `t`.
    pub fn local_delta(&self, p: usize, t: usize, dm: usize, v: &[f64]) -> (f64, f64) {
        let mut u = Vec::new();
        self.ensemble.joint_action(p, t, &mut u);
        let (l0, c0) = self.stage_terms(p, t, &u);
        let o = self.offsets[dm];
        u[o..o + v.len()].copy_from_slice(v);
        let (l1, c1) = self.stage_terms(p, t, &u);
        (l1 - l0, c1 - c0)
    }

    /// Makes a change permanent: updates the stored action and the path totals.
    pub fn commit(&mut self, p: usize, t: usize, dm: usize, v: &[f64]) {
        let (dl, dc) = self.local_delta(p, t, dm, v);
        self.log_theta[p] += dl;
        self.cost[p] += dc;
        let nodes = self.ensemble.nodes();
        let d = self.ensemble.action_dims[dm];
        let o = (p * nodes + t) * d;
        self.ensemble.actions[dm][o..o + d].copy_from_slice(v);
    }

    /// Per-path shifted integrand after switching DM `dm` at stage `t` to `v`,
    /// minus the current one.
    pub fn switch_gains(&self, t: usize, dm: usize, v: &[f64]) -> Vec<f64> {
        (0..self.n_paths())
            .into_par_iter()
            .map(|p| {
                let (dl, dc) = self.local_delta(p, t, dm, v);
                self.value_with(p, dl, dc) - self.value(p)
            })
            .collect()
    }

    /// Effective sample size of the terminal weights.
    pub fn ess(&self) -> f64 {
        let w: Vec<f64> = self.log_theta.iter().map(|l| (l - self.shift).exp()).collect();
        let s: f64 = w.iter().sum();
        let s2: f64 = w.iter().map(|v| v * v).sum();
        s * s / s2
    }
}
