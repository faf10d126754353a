//! Euler–Maruyama path ensembles under the reference and original measures.
//!
//! Per path the noise stream is consumed in a fixed order: the initial state,
//! then for every step the state noise followed by each DM's observation noise.
//! Relaxed-policy draws come from a separate action stream (one uniform per DM
//! per node, drawn whether or not the policy is relaxed), so changing a policy
//! never shifts the noise of any path.

use std::io::{Read, Write};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeamsError};
use crate::linalg::Mat;
use crate::numerics::{fill_std_normal, path_stream, PathRng, StreamDomain};
use crate::policy::PolicyProfile;
use crate::problem::{
    CompiledInformation, DiffusionField, Flavor, PathHistory, ScalarField, TeamProblem, VectorField,
};

/// Uniform grid `0 = t_0 < … < t_M = T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    t_end: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(t_end: f64, dt: f64) -> Result<Self> {
        if !(t_end > 0.0 && dt > 0.0 && t_end.is_finite()) {
            return Err(TeamsError::InvalidArgument(format!("grid needs T > 0 and dt > 0, got {t_end}, {dt}")));
        }
        let steps = (t_end / dt).round().max(1.0) as usize;
        if ((steps as f64) * dt - t_end).abs() > 1e-9 * t_end {
            return Err(TeamsError::InvalidArgument(format!("dt {dt} does not divide T {t_end}")));
        }
        Ok(TimeGrid { t_end, steps })
    }

    pub fn with_steps(t_end: f64, steps: usize) -> Self {
        assert!(steps > 0 && t_end > 0.0, "grid needs at least one step on a positive horizon");
        TimeGrid { t_end, steps }
    }

    pub fn end(&self) -> f64 {
        self.t_end
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.t_end / self.steps as f64
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t_end * j as f64 / self.steps as f64
    }

    pub fn node_of(&self, t: f64) -> Option<usize> {
        let r = t / self.dt();
        let j = r.round();
        ((r - j).abs() <= 1e-9 * r.abs().max(1.0) && j >= 0.0 && j as usize <= self.steps).then_some(j as usize)
    }

    /// Trapezoid weight of node `j` for the running-cost integral.
    pub fn trapezoid(&self, j: usize) -> f64 {
        if j == 0 || j == self.steps {
            0.5 * self.dt()
        } else {
            self.dt()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Reference,
    Original,
}

/// Stored driving noise.
///
/// Continuous flavor: `state[p][j]` is ΔW over step `j` and `obs[i][p][j]` is ΔBⁱ.
/// Discrete flavor: `state[p][t-1]` is ξ(t) for `t = 1..T` and `obs[i][p][t]`
/// is ηⁱ(t) for `t = 0..T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Increments {
    pub state: Vec<f64>,
    pub obs: Vec<Vec<f64>>,
}

/// A batch of simulated paths; arrays are path-major, then node, then coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub grid: TimeGrid,
    pub discrete: bool,
    pub measure: Measure,
    pub seed: u64,
    /// Stream id of the first path (chunked simulation).
    pub first_path: u64,
    pub n_paths: usize,
    pub state_dim: usize,
    pub noise_dim: usize,
    pub obs_dims: Vec<usize>,
    pub action_dims: Vec<usize>,
    pub states: Vec<f64>,
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub increments: Option<Increments>,
}

impl PathEnsemble {
    pub fn nodes(&self) -> usize {
        self.grid.nodes()
    }

    pub fn state(&self, p: usize, j: usize) -> &[f64] {
        let n = self.state_dim;
        let o = (p * self.nodes() + j) * n;
        &self.states[o..o + n]
    }

    pub fn observation(&self, i: usize, p: usize, j: usize) -> &[f64] {
        let k = self.obs_dims[i];
        let o = (p * self.nodes() + j) * k;
        &self.observations[i][o..o + k]
    }

    pub fn action(&self, i: usize, p: usize, j: usize) -> &[f64] {
        let d = self.action_dims[i];
        let o = (p * self.nodes() + j) * d;
        &self.actions[i][o..o + d]
    }

    pub fn joint_action(&self, p: usize, j: usize, out: &mut Vec<f64>) {
        out.clear();
        for i in 0..self.action_dims.len() {
            out.extend_from_slice(self.action(i, p, j));
        }
    }

    /// Number of stored state-noise vectors per path.
    pub fn state_noise_len(&self) -> usize {
        self.grid.steps()
    }

    /// Number of stored observation-noise vectors per path.
    pub fn obs_noise_len(&self) -> usize {
        if self.discrete {
            self.grid.nodes()
        } else {
            self.grid.steps()
        }
    }

    pub fn state_noise(&self, p: usize, j: usize) -> Option<&[f64]> {
        let inc = self.increments.as_ref()?;
        let m = self.noise_dim;
        let o = (p * self.state_noise_len() + j) * m;
        Some(&inc.state[o..o + m])
    }

    pub fn obs_noise(&self, i: usize, p: usize, j: usize) -> Option<&[f64]> {
        let inc = self.increments.as_ref()?;
        let k = self.obs_dims[i];
        let o = (p * self.obs_noise_len() + j) * k;
        Some(&inc.obs[i][o..o + k])
    }

    pub fn path(&self, p: usize) -> EnsemblePath<'_> {
        EnsemblePath { ensemble: self, p }
    }

    /// Drops the stored increments (ensembles then cannot be reweighted).
    pub fn without_increments(mut self) -> Self {
        self.increments = None;
        self
    }
}

/// One path of an ensemble viewed as a [`PathHistory`].
pub struct EnsemblePath<'a> {
    ensemble: &'a PathEnsemble,
    p: usize,
}

impl PathHistory for EnsemblePath<'_> {
    fn observation(&self, dm: usize, node: usize) -> &[f64] {
        self.ensemble.observation(dm, self.p, node)
    }
    fn state(&self, node: usize) -> &[f64] {
        self.ensemble.state(self.p, node)
    }
}

struct LocalPath<'a> {
    n: usize,
    obs_dims: &'a [usize],
    x: &'a [f64],
    y: &'a [Vec<f64>],
}

impl PathHistory for LocalPath<'_> {
    fn observation(&self, dm: usize, node: usize) -> &[f64] {
        let k = self.obs_dims[dm];
        &self.y[dm][node * k..(node + 1) * k]
    }
    fn state(&self, node: usize) -> &[f64] {
        &self.x[node * self.n..(node + 1) * self.n]
    }
}

/// Per-path scratch buffers, also the unit copied into the ensemble.
struct PathBuf {
    x: Vec<f64>,
    y: Vec<Vec<f64>>,
    u: Vec<Vec<f64>>,
    dw: Vec<f64>,
    db: Vec<Vec<f64>>,
}

struct Simulator<'a> {
    problem: &'a TeamProblem,
    profile: &'a PolicyProfile,
    grid: TimeGrid,
    measure: Measure,
    seed: u64,
    info: Vec<CompiledInformation>,
    noise_sqrt: Vec<Mat>,
    gain: Option<Mat>,
    n: usize,
    m: usize,
    k: Vec<usize>,
    d: Vec<usize>,
}

const BLOCK: usize = 256;

impl<'a> Simulator<'a> {
    fn new(
        problem: &'a TeamProblem,
        profile: &'a PolicyProfile,
        grid: TimeGrid,
        measure: Measure,
        seed: u64,
    ) -> Result<Self> {
        problem.check_shapes()?;
        profile.check(problem)?;
        let factors = problem.factors()?;
        let obs_dims = problem.obs_dims();
        let info = problem
            .dms
            .iter()
            .enumerate()
            .map(|(i, dm)| CompiledInformation::compile(&dm.information, i, &grid, &obs_dims, problem.state_dim))
            .collect::<Result<Vec<_>>>()?;
        let gain = match &problem.flavor {
            Flavor::DiscreteTime { gain, .. } => Some(gain.clone()),
            Flavor::ContinuousTime { .. } => None,
        };
        Ok(Simulator {
            problem,
            profile,
            grid,
            measure,
            seed,
            info,
            noise_sqrt: factors.noise.into_iter().map(|f| f.sqrt).collect(),
            gain,
            n: problem.state_dim,
            m: problem.noise_dim(),
            k: obs_dims,
            d: problem.action_dims(),
        })
    }

    fn new_buf(&self) -> PathBuf {
        let nodes = self.grid.nodes();
        let obs_len = if self.gain.is_some() { nodes } else { self.grid.steps() };
        PathBuf {
            x: vec![0.0; nodes * self.n],
            y: self.k.iter().map(|k| vec![0.0; nodes * k]).collect(),
            u: self.d.iter().map(|d| vec![0.0; nodes * d]).collect(),
            dw: vec![0.0; self.grid.steps() * self.m],
            db: self.k.iter().map(|k| vec![0.0; obs_len * k]).collect(),
        }
    }

    /// Actions of every DM at node `j` from the history written so far.
    fn decide(&self, j: usize, buf: &mut PathBuf, arng: &mut PathRng, z: &mut Vec<f64>, joint: &mut Vec<f64>) {
        let t = self.grid.time(j);
        joint.clear();
        for i in 0..self.d.len() {
            let uniform: f64 = arng.random();
            let policy = &self.profile.per_dm[i];
            {
                let hist = LocalPath { n: self.n, obs_dims: &self.k, x: &buf.x, y: &buf.y };
                self.info[i].policy_features(j, policy.recent(), &hist, z);
            }
            let d = self.d[i];
            let out = &mut buf.u[i][j * d..(j + 1) * d];
            policy.act(t, z, uniform, &self.problem.dms[i].action, out);
            joint.extend_from_slice(out);
        }
    }

    fn run_continuous(&self, p: u64, buf: &mut PathBuf) {
        let mut rng = path_stream(self.seed, StreamDomain::Noise, p);
        let mut arng = path_stream(self.seed, StreamDomain::Action, p);
        let (n, m) = (self.n, self.m);
        let dt = self.grid.dt();
        let sdt = dt.sqrt();
        self.problem.initial.sample(&mut rng, &mut buf.x[..n]);
        for y in &mut buf.y {
            y.iter_mut().for_each(|v| *v = 0.0);
        }
        let diffusion = match &self.problem.flavor {
            Flavor::ContinuousTime { diffusion, .. } => diffusion,
            Flavor::DiscreteTime { .. } => unreachable!(),
        };
        let mut sigma = Mat::zeros(n, m);
        let mut drift = vec![0.0; n];
        let mut z = Vec::new();
        let mut u = Vec::new();
        let mut h = Vec::new();
        for j in 0..=self.grid.steps() {
            self.decide(j, buf, &mut arng, &mut z, &mut u);
            if j == self.grid.steps() {
                break;
            }
            let t = self.grid.time(j);
            let dw = &mut buf.dw[j * m..(j + 1) * m];
            fill_std_normal(&mut rng, dw);
            dw.iter_mut().for_each(|v| *v *= sdt);
            let (xj, xnext) = buf.x.split_at_mut((j + 1) * n);
            let xj = &xj[j * n..];
            let xnext = &mut xnext[..n];
            self.problem.drift.eval(t, xj, &u, &mut drift);
            diffusion.eval(t, xj, &u, &mut sigma);
            for c in 0..n {
                xnext[c] = xj[c] + drift[c] * dt;
            }
            sigma.mul_vec_add(dw, xnext);
            for i in 0..self.k.len() {
                let k = self.k[i];
                let db = &mut buf.db[i][j * k..(j + 1) * k];
                fill_std_normal(&mut rng, db);
                db.iter_mut().for_each(|v| *v *= sdt);
                let (yj, ynext) = buf.y[i].split_at_mut((j + 1) * k);
                let yj = &yj[j * k..];
                let ynext = &mut ynext[..k];
                ynext.copy_from_slice(yj);
                self.noise_sqrt[i].mul_vec_add(db, ynext);
                if self.measure == Measure::Original {
                    h.resize(k, 0.0);
                    self.problem.dms[i].observation.eval(t, xj, &u, &mut h);
                    for c in 0..k {
                        ynext[c] += h[c] * dt;
                    }
                }
            }
        }
    }

    fn run_discrete(&self, p: u64, buf: &mut PathBuf) {
        let mut rng = path_stream(self.seed, StreamDomain::Noise, p);
        let mut arng = path_stream(self.seed, StreamDomain::Action, p);
        let n = self.n;
        let gain = self.gain.as_ref().expect("discrete flavor");
        let stages = self.grid.steps();
        self.problem.initial.sample(&mut rng, &mut buf.x[..n]);
        let du: usize = self.d.iter().sum();
        let mut prev_u = vec![0.0; du];
        let mut u = Vec::new();
        let mut z = Vec::new();
        let mut h = Vec::new();
        for t in 0..=stages {
            let tf = t as f64;
            if t > 0 {
                let xi = &mut buf.dw[(t - 1) * n..t * n];
                fill_std_normal(&mut rng, xi);
                let (xprev, xt) = buf.x.split_at_mut(t * n);
                let xprev = &xprev[(t - 1) * n..];
                let xt = &mut xt[..n];
                match self.measure {
                    Measure::Reference => xt.copy_from_slice(xi),
                    Measure::Original => {
                        self.problem.drift.eval(tf - 1.0, xprev, &prev_u, xt);
                        gain.mul_vec_add(xi, xt);
                    }
                }
            }
            for i in 0..self.k.len() {
                let k = self.k[i];
                let eta = &mut buf.db[i][t * k..(t + 1) * k];
                fill_std_normal(&mut rng, eta);
                let y = &mut buf.y[i][t * k..(t + 1) * k];
                match self.measure {
                    Measure::Reference => y.copy_from_slice(eta),
                    Measure::Original => {
                        h.resize(k, 0.0);
                        self.problem.dms[i].observation.eval(tf, &buf.x[t * n..(t + 1) * n], &prev_u, &mut h);
                        y.copy_from_slice(&h);
                        self.noise_sqrt[i].mul_vec_add(eta, y);
                    }
                }
            }
            if t < stages {
                self.decide(t, buf, &mut arng, &mut z, &mut u);
                prev_u.copy_from_slice(&u);
            } else {
                // Keep the action stream aligned with the continuous convention.
                for _ in 0..self.d.len() {
                    let _: f64 = arng.random();
                }
                for ui in &mut buf.u {
                    let d = ui.len() / self.grid.nodes();
                    ui[t * d..].iter_mut().for_each(|v| *v = 0.0);
                }
            }
        }
    }

    fn run(&self, n_paths: usize, first_path: u64) -> PathEnsemble {
        let discrete = self.gain.is_some();
        let blocks: Vec<(usize, usize)> =
            (0..n_paths.div_ceil(BLOCK)).map(|b| (b * BLOCK, ((b + 1) * BLOCK).min(n_paths))).collect();
        let parts: Vec<Vec<PathBuf>> = blocks
            .par_iter()
            .map(|&(lo, hi)| {
                (lo..hi)
                    .map(|p| {
                        let mut buf = self.new_buf();
                        let id = first_path + p as u64;
                        if discrete {
                            self.run_discrete(id, &mut buf);
                        } else {
                            self.run_continuous(id, &mut buf);
                        }
                        buf
                    })
                    .collect()
            })
            .collect();
        let nodes = self.grid.nodes();
        let obs_len = if discrete { nodes } else { self.grid.steps() };
        let mut e = PathEnsemble {
            grid: self.grid,
            discrete,
            measure: self.measure,
            seed: self.seed,
            first_path,
            n_paths,
            state_dim: self.n,
            noise_dim: self.m,
            obs_dims: self.k.clone(),
            action_dims: self.d.clone(),
            states: Vec::with_capacity(n_paths * nodes * self.n),
            observations: self.k.iter().map(|k| Vec::with_capacity(n_paths * nodes * k)).collect(),
            actions: self.d.iter().map(|d| Vec::with_capacity(n_paths * nodes * d)).collect(),
            increments: Some(Increments {
                state: Vec::with_capacity(n_paths * self.grid.steps() * self.m),
                obs: self.k.iter().map(|k| Vec::with_capacity(n_paths * obs_len * k)).collect(),
            }),
        };
        let inc = e.increments.as_mut().unwrap();
        for buf in parts.into_iter().flatten() {
            e.states.extend_from_slice(&buf.x);
            inc.state.extend_from_slice(&buf.dw);
            for i in 0..self.k.len() {
                e.observations[i].extend_from_slice(&buf.y[i]);
                inc.obs[i].extend_from_slice(&buf.db[i]);
            }
            for i in 0..self.d.len() {
                e.actions[i].extend_from_slice(&buf.u[i]);
            }
        }
        e
    }
}

/// Default grid of a problem: the stage lattice for discrete problems, `dt` otherwise.
pub fn problem_grid(problem: &TeamProblem, dt: f64) -> Result<TimeGrid> {
    match &problem.flavor {
        Flavor::DiscreteTime { stages, .. } => Ok(TimeGrid::with_steps(*stages as f64, *stages)),
        Flavor::ContinuousTime { horizon, .. } => TimeGrid::new(*horizon, dt),
    }
}

fn check_grid(problem: &TeamProblem, grid: &TimeGrid) -> Result<()> {
    if (grid.end() - problem.horizon()).abs() > 1e-9 * problem.horizon() {
        return Err(TeamsError::InvalidArgument(format!(
            "grid ends at {} but the horizon is {}",
            grid.end(),
            problem.horizon()
        )));
    }
    if problem.is_discrete() && grid.steps() as f64 != problem.horizon() {
        return Err(TeamsError::InvalidArgument("discrete problems use one node per stage".into()));
    }
    Ok(())
}

/// Paths `first_path .. first_path + n_paths` under the given measure.
pub fn simulate_range(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
    measure: Measure,
    first_path: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(TeamsError::InvalidArgument("n_paths must be positive".into()));
    }
    check_grid(problem, &grid)?;
    Ok(Simulator::new(problem, profile, grid, measure, seed)?.run(n_paths, first_path))
}

/// Observations are scaled noise independent of all decisions.
pub fn simulate_reference(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_range(problem, profile, grid, n_paths, seed, Measure::Reference, 0)
}

/// Observations carry the signal `hⁱ` with actions fed back causally.
pub fn simulate_original(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    grid: TimeGrid,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    simulate_range(problem, profile, grid, n_paths, seed, Measure::Original, 0)
}

/// Discrete-time recursion; the reference measure makes `x(t ≥ 1)` and `y(t)`
/// i.i.d. standard normal.
pub fn simulate_discrete(
    problem: &TeamProblem,
    profile: &PolicyProfile,
    n_paths: usize,
    seed: u64,
    measure: Measure,
) -> Result<PathEnsemble> {
    let Flavor::DiscreteTime { stages, gain } = &problem.flavor else {
        return Err(TeamsError::InvalidArgument("simulate_discrete needs a discrete-time problem".into()));
    };
    if gain.inverse_and_logdet().is_none() {
        return Err(TeamsError::SingularGain { stage: 0 });
    }
    simulate_range(problem, profile, TimeGrid::with_steps(*stages as f64, *stages), n_paths, seed, measure, 0)
}

/// Re-derives the actions of a discrete reference-measure ensemble for another
/// profile. Under the reference measure states and observations do not depend on
/// decisions, so one ensemble serves every profile (the static reduction).
pub fn reapply_policy(problem: &TeamProblem, profile: &PolicyProfile, ensemble: &PathEnsemble) -> Result<PathEnsemble> {
    if !ensemble.discrete || ensemble.measure != Measure::Reference {
        return Err(TeamsError::WrongMeasure(
            "only discrete reference-measure ensembles are decision-free".into(),
        ));
    }
    let sim = Simulator::new(problem, profile, ensemble.grid, Measure::Reference, ensemble.seed)?;
    let nodes = ensemble.nodes();
    let stages = ensemble.grid.steps();
    let per_path: Vec<Vec<Vec<f64>>> = (0..ensemble.n_paths)
        .into_par_iter()
        .map_init(Vec::new, |z, p| {
            let mut arng = path_stream(ensemble.seed, StreamDomain::Action, ensemble.first_path + p as u64);
            let hist = ensemble.path(p);
            let mut out: Vec<Vec<f64>> = sim.d.iter().map(|d| vec![0.0; nodes * d]).collect();
            for t in 0..stages {
                for i in 0..sim.d.len() {
                    let uniform: f64 = arng.random();
                    let policy = &profile.per_dm[i];
                    sim.info[i].policy_features(t, policy.recent(), &hist, z);
                    let d = sim.d[i];
                    policy.act(t as f64, z, uniform, &problem.dms[i].action, &mut out[i][t * d..(t + 1) * d]);
                }
            }
            out
        })
        .collect();
    let mut e = ensemble.clone();
    for (i, a) in e.actions.iter_mut().enumerate() {
        a.clear();
        for path in &per_path {
            a.extend_from_slice(&path[i]);
        }
    }
    Ok(e)
}

/// Policy features of one DM at every node of every path.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub dim: usize,
    pub nodes: usize,
    pub data: Vec<f64>,
}

impl FeatureTable {
    pub fn at(&self, p: usize, j: usize) -> &[f64] {
        let o = (p * self.nodes + j) * self.dim;
        &self.data[o..o + self.dim]
    }

    /// All paths at one node, row-major `n_paths × dim`.
    pub fn node(&self, j: usize) -> Vec<f64> {
        let n_paths = self.data.len() / (self.nodes * self.dim).max(1);
        (0..n_paths).flat_map(|p| self.at(p, j).iter().copied()).collect()
    }
}

/// Reads the `recent`-sample policy features of DM `dm` from an ensemble.
pub fn feature_table(problem: &TeamProblem, dm: usize, recent: usize, ensemble: &PathEnsemble) -> Result<FeatureTable> {
    let info = CompiledInformation::compile(
        &problem.dms[dm].information,
        dm,
        &ensemble.grid,
        &ensemble.obs_dims,
        ensemble.state_dim,
    )?;
    let dim = info.policy_dim(recent);
    let nodes = ensemble.nodes();
    let per_path: Vec<Vec<f64>> = (0..ensemble.n_paths)
        .into_par_iter()
        .map(|p| {
            let hist = ensemble.path(p);
            let mut z = Vec::with_capacity(dim);
            let mut out = Vec::with_capacity(nodes * dim);
            for j in 0..nodes {
                info.policy_features(j, recent, &hist, &mut z);
                out.extend_from_slice(&z);
            }
            out
        })
        .collect();
    Ok(FeatureTable { dim, nodes, data: per_path.concat() })
}

/// Per-path payoff `Σ_j w_j ℓ(t_j) + φ(x(T))` (trapezoid weights in continuous
/// time, `Σ_{t<T} ℓ(t)` in discrete time).
pub fn path_costs(problem: &TeamProblem, ensemble: &PathEnsemble) -> Vec<f64> {
    let nodes = ensemble.nodes();
    let grid = ensemble.grid;
    (0..ensemble.n_paths)
        .into_par_iter()
        .map_init(Vec::new, |u, p| {
            let mut c = 0.0;
            for j in 0..nodes {
                let w = if ensemble.discrete {
                    if j + 1 == nodes {
                        continue;
                    }
                    1.0
                } else {
                    grid.trapezoid(j)
                };
                ensemble.joint_action(p, j, u);
                c += w * problem.running_cost.eval(grid.time(j), ensemble.state(p, j), u);
            }
            c + problem.terminal_cost.eval(grid.end(), ensemble.state(p, nodes - 1), &[])
        })
        .collect()
}

/// Column-wise z-scores of the stored state noise: `(mean, variance)` deviations
/// from `(0, Δt)` in standard errors, one pair per noise coordinate and step.
pub fn increment_zscores(ensemble: &PathEnsemble) -> Result<Vec<(f64, f64)>> {
    let inc = ensemble.increments.as_ref().ok_or(TeamsError::MissingIncrements)?;
    let var = if ensemble.discrete { 1.0 } else { ensemble.grid.dt() };
    let n = ensemble.n_paths as f64;
    let steps = ensemble.state_noise_len();
    let m = ensemble.noise_dim;
    let mut out = Vec::with_capacity(steps * m);
    for j in 0..steps {
        for c in 0..m {
            let col: Vec<f64> = (0..ensemble.n_paths).map(|p| inc.state[(p * steps + j) * m + c]).collect();
            let mean = crate::numerics::mean(&col);
            let sq: Vec<f64> = col.iter().map(|v| v * v).collect();
            let second = crate::numerics::mean(&sq);
            // Var of a squared normal is 2 var².
            out.push((mean / (var / n).sqrt(), (second - var) / (2.0 * var * var / n).sqrt()));
        }
    }
    Ok(out)
}

/// Least-squares slope of `log error` against `log dt`.
pub fn empirical_order(dts: &[f64], errors: &[f64]) -> f64 {
    let lx: Vec<f64> = dts.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = errors.iter().map(|v| v.ln()).collect();
    let mx = crate::numerics::mean(&lx);
    let my = crate::numerics::mean(&ly);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

const DUMP_MAGIC: &[u8; 8] = b"TEAMSENS";
const DUMP_VERSION: u32 = 1;

/// Binary columnar dump, all little-endian:
///
/// ```text
/// magic "TEAMSENS", u32 version,
/// u64 n_paths, u64 steps, f64 t_end, u64 seed, u64 first_path,
/// u8 discrete, u8 measure (0 reference, 1 original), u8 has_increments,
/// u64 state_dim, u64 noise_dim, u64 dm_count, then per DM: u64 obs_dim, u64 action_dim,
/// f64 columns: states, observations per DM, actions per DM,
/// then (if present) state noise and observation noise per DM.
/// ```
pub fn write_dump(ensemble: &PathEnsemble, w: &mut impl Write) -> Result<()> {
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&DUMP_VERSION.to_le_bytes())?;
    for v in [ensemble.n_paths as u64, ensemble.grid.steps() as u64] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&ensemble.grid.end().to_le_bytes())?;
    w.write_all(&ensemble.seed.to_le_bytes())?;
    w.write_all(&ensemble.first_path.to_le_bytes())?;
    let measure = match ensemble.measure {
        Measure::Reference => 0u8,
        Measure::Original => 1u8,
    };
    w.write_all(&[ensemble.discrete as u8, measure, ensemble.increments.is_some() as u8])?;
    for v in [ensemble.state_dim, ensemble.noise_dim, ensemble.obs_dims.len()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    for (k, d) in ensemble.obs_dims.iter().zip(&ensemble.action_dims) {
        w.write_all(&(*k as u64).to_le_bytes())?;
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    let mut column = |xs: &[f64]| -> Result<()> {
        let mut bytes = Vec::with_capacity(xs.len() * 8);
        for x in xs {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    };
    column(&ensemble.states)?;
    for o in &ensemble.observations {
        column(o)?;
    }
    for a in &ensemble.actions {
        column(a)?;
    }
    if let Some(inc) = &ensemble.increments {
        column(&inc.state)?;
        for o in &inc.obs {
            column(o)?;
        }
    }
    Ok(())
}

pub fn read_dump(r: &mut impl Read) -> Result<PathEnsemble> {
    let bad = |m: &str| TeamsError::Io(format!("ensemble dump: {m}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(bad("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != DUMP_VERSION {
        return Err(bad("unsupported version"));
    }
    let u64s = |r: &mut dyn Read| -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(u64::from_le_bytes(b))
    };
    let n_paths = u64s(r)? as usize;
    let steps = u64s(r)? as usize;
    let t_end = f64::from_bits(u64s(r)?);
    let seed = u64s(r)?;
    let first_path = u64s(r)?;
    let mut flags = [0u8; 3];
    r.read_exact(&mut flags)?;
    let state_dim = u64s(r)? as usize;
    let noise_dim = u64s(r)? as usize;
    let dms = u64s(r)? as usize;
    let mut obs_dims = Vec::with_capacity(dms);
    let mut action_dims = Vec::with_capacity(dms);
    for _ in 0..dms {
        obs_dims.push(u64s(r)? as usize);
        action_dims.push(u64s(r)? as usize);
    }
    if steps == 0 || !(t_end > 0.0) {
        return Err(bad("invalid grid"));
    }
    let grid = TimeGrid::with_steps(t_end, steps);
    let nodes = grid.nodes();
    let discrete = flags[0] == 1;
    let column = |r: &mut dyn Read, len: usize| -> Result<Vec<f64>> {
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    };
    let states = column(r, n_paths * nodes * state_dim)?;
    let observations = obs_dims.iter().map(|k| column(r, n_paths * nodes * k)).collect::<Result<Vec<_>>>()?;
    let actions = action_dims.iter().map(|d| column(r, n_paths * nodes * d)).collect::<Result<Vec<_>>>()?;
    let increments = if flags[2] == 1 {
        let obs_len = if discrete { nodes } else { steps };
        Some(Increments {
            state: column(r, n_paths * steps * noise_dim)?,
            obs: obs_dims.iter().map(|k| column(r, n_paths * obs_len * k)).collect::<Result<Vec<_>>>()?,
        })
    } else {
        None
    };
    Ok(PathEnsemble {
        grid,
        discrete,
        measure: if flags[1] == 1 { Measure::Original } else { Measure::Reference },
        seed,
        first_path,
        n_paths,
        state_dim,
        noise_dim,
        obs_dims,
        action_dims,
        states,
        observations,
        actions,
        increments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Policy, RegularPolicy};
    use crate::problem::*;

    fn scalar(drift: VectorFamily, sigma: f64, h: VectorFamily, x0: f64) -> TeamProblem {
        TeamProblem {
            name: "scalar".into(),
            flavor: Flavor::ContinuousTime {
                horizon: 1.0,
                noise_dim: 1,
                diffusion: DiffusionFamily::Constant { s: Mat::scalar(sigma) },
            },
            state_dim: 1,
            drift,
            dms: vec![DecisionMaker {
                action: ActionSpec::interval(-1.0, 1.0),
                observation: h,
                noise_scale: Mat::scalar(1.0),
                information: InformationStructure::own_history(),
            }],
            running_cost: ScalarFamily::zero(),
            terminal_cost: ScalarFamily::zero(),
            initial: InitialDistribution::Point { x: vec![x0] },
            convexity: ConvexityDeclaration::Auto,
        }
    }

    fn idle() -> PolicyProfile {
        PolicyProfile { per_dm: vec![Policy::Regular(RegularPolicy::constant(&[0.0]))] }
    }

    #[test]
    fn grid_nodes_and_lookup() {
        let g = TimeGrid::new(1.0, 0.01).unwrap();
        assert_eq!(g.nodes(), 101);
        assert_eq!(g.node_of(0.3), Some(30));
        assert_eq!(g.node_of(0.305), None);
        assert!(TimeGrid::new(1.0, 0.3).is_err());
    }

    #[test]
    fn zero_dynamics_keep_initial_state() {
        let p = scalar(VectorFamily::Zero { dim: 1 }, 0.0, VectorFamily::Zero { dim: 1 }, 2.5);
        let e = simulate_original(&p, &idle(), TimeGrid::with_steps(1.0, 10), 8, 1).unwrap();
        assert!(e.states.iter().all(|v| *v == 2.5));
    }

    #[test]
    fn linear_ode_terminal_state() {
        let p = scalar(VectorFamily::scalar_linear(-1.0, &[], 0.0), 0.0, VectorFamily::Zero { dim: 1 }, 1.0);
        let e = simulate_reference(&p, &idle(), TimeGrid::new(1.0, 1e-3).unwrap(), 2, 3).unwrap();
        assert!((e.state(0, 1000)[0] - (-1.0f64).exp()).abs() < 2e-3);
    }

    #[test]
    fn h_zero_couples_measures_exactly() {
        let p = scalar(VectorFamily::scalar_linear(-0.3, &[1.0], 0.0), 0.4, VectorFamily::Zero { dim: 1 }, 0.1);
        let g = TimeGrid::with_steps(1.0, 20);
        let a = simulate_reference(&p, &idle(), g, 50, 9).unwrap();
        let mut b = simulate_original(&p, &idle(), g, 50, 9).unwrap();
        b.measure = Measure::Reference;
        assert_eq!(a, b);
    }

    #[test]
    fn constant_signal_integrates_linearly() {
        let p = scalar(VectorFamily::Zero { dim: 1 }, 0.0, VectorFamily::scalar_linear(1.0, &[], 0.0), 3.0);
        let g = TimeGrid::with_steps(1.0, 10);
        let e = simulate_original(&p, &idle(), g, 4, 2).unwrap();
        for path in 0..4 {
            let mut b = 0.0;
            for j in 0..10 {
                b += e.obs_noise(0, path, j).unwrap()[0];
                let y = e.observation(0, path, j + 1)[0];
                assert!((y - 3.0 * g.time(j + 1) - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dump_round_trip() {
        let p = scalar(VectorFamily::scalar_linear(-0.3, &[1.0], 0.0), 0.4, VectorFamily::Zero { dim: 1 }, 0.1);
        let e = simulate_original(&p, &idle(), TimeGrid::with_steps(1.0, 5), 7, 4).unwrap();
        let mut bytes = Vec::new();
        write_dump(&e, &mut bytes).unwrap();
        let back = read_dump(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn chunked_ranges_reproduce_paths() {
        let p = scalar(VectorFamily::scalar_linear(-0.3, &[1.0], 0.0), 0.4, VectorFamily::scalar_linear(1.0, &[], 0.0), 0.1);
        let g = TimeGrid::with_steps(1.0, 5);
        let all = simulate_range(&p, &idle(), g, 10, 4, Measure::Original, 0).unwrap();
        let tail = simulate_range(&p, &idle(), g, 4, 4, Measure::Original, 6).unwrap();
        assert_eq!(all.state(7, 5), tail.state(1, 5));
    }
}
