//! Domain model of a decentralized team decision problem.

pub mod family;
pub mod info;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use family::{
    BilinearTerm, DiffusionFamily, DiffusionField, FnScalarField, FnVectorField, ScalarFamily, ScalarField, Structure,
    VectorFamily, VectorField,
};
pub use info::{
    information_view, policy_feature_dim, CompiledInformation, FeatureSource, InformationStructure, PathHistory, Sample, SharedSource,
};

use crate::error::{Result, TeamsError};
use crate::linalg::{Mat, SpdFactors};
use crate::numerics::{path_stream, std_normal, StreamDomain};

/// Feasible action set `Aⁱ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActionSet {
    /// Per-coordinate closed interval.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    /// Explicit finite set of atoms (possibly nonconvex).
    Grid { atoms: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    pub dim: usize,
    pub set: ActionSet,
}

impl ActionSpec {
    pub fn interval(lower: f64, upper: f64) -> Self {
        ActionSpec { dim: 1, set: ActionSet::Box { lower: vec![lower], upper: vec![upper] } }
    }

    pub fn scalar_grid(atoms: &[f64]) -> Self {
        ActionSpec { dim: 1, set: ActionSet::Grid { atoms: atoms.iter().map(|a| vec![*a]).collect() } }
    }

    pub fn atoms(&self) -> Option<&[Vec<f64>]> {
        match &self.set {
            ActionSet::Grid { atoms } => Some(atoms),
            ActionSet::Box { .. } => None,
        }
    }

    /// Projects `u` into the set in place. Returns, per coordinate, whether the
    /// coordinate is pinned (at an active bound, or always for grids).
    pub fn project(&self, u: &mut [f64], pinned: &mut [bool]) {
        match &self.set {
            ActionSet::Box { lower, upper } => {
                for k in 0..u.len() {
                    if u[k] <= lower[k] {
                        u[k] = lower[k];
                        pinned[k] = true;
                    } else if u[k] >= upper[k] {
                        u[k] = upper[k];
                        pinned[k] = true;
                    } else {
                        pinned[k] = false;
                    }
                }
            }
            ActionSet::Grid { atoms } => {
                let best = nearest_atom(atoms, u);
                u.copy_from_slice(&atoms[best]);
                pinned.iter_mut().for_each(|p| *p = true);
            }
        }
    }

    /// Zero the components of a gradient that point out of the box at active
    /// bounds (projected-gradient criterion for minimization).
    pub fn project_gradient(&self, u: &[f64], grad: &mut [f64]) {
        if let ActionSet::Box { lower, upper } = &self.set {
            for k in 0..u.len() {
                let scale = 1e-9 * (1.0 + upper[k].abs().max(lower[k].abs()));
                if (u[k] - lower[k]).abs() <= scale && grad[k] > 0.0 {
                    grad[k] = 0.0;
                }
                if (u[k] - upper[k]).abs() <= scale && grad[k] < 0.0 {
                    grad[k] = 0.0;
                }
            }
        }
    }

    /// Typical magnitude of an action, used to scale finite-difference steps.
    pub fn scale(&self) -> f64 {
        match &self.set {
            ActionSet::Box { lower, upper } => lower
                .iter()
                .zip(upper)
                .map(|(l, u)| if l.is_finite() && u.is_finite() { (u - l) / 2.0 } else { 1.0 })
                .fold(0.0, f64::max)
                .max(1e-3),
            ActionSet::Grid { atoms } => atoms
                .iter()
                .flat_map(|a| a.iter())
                .fold(0.0_f64, |m, v| m.max(v.abs()))
                .max(1e-3),
        }
    }

    fn check(&self, dm: usize) -> Result<()> {
        let bad = |msg: String| Err(TeamsError::MalformedProblem(format!("action set of DM {dm}: {msg}")));
        if self.dim == 0 {
            return bad("dimension must be positive".into());
        }
        match &self.set {
            ActionSet::Box { lower, upper } => {
                if lower.len() != self.dim || upper.len() != self.dim {
                    return bad("bound lengths differ from dim".into());
                }
                for (l, u) in lower.iter().zip(upper) {
                    if !l.is_finite() || !u.is_finite() {
                        return bad("bounds must be finite (closed and bounded)".into());
                    }
                    if l > u {
                        return bad(format!("empty interval [{l}, {u}]"));
                    }
                }
            }
            ActionSet::Grid { atoms } => {
                if atoms.is_empty() {
                    return bad("grid has no atoms".into());
                }
                if atoms.iter().any(|a| a.len() != self.dim || a.iter().any(|v| !v.is_finite())) {
                    return bad("atoms must be finite vectors of length dim".into());
                }
            }
        }
        Ok(())
    }
}

pub fn nearest_atom(atoms: &[Vec<f64>], u: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, a) in atoms.iter().enumerate() {
        let d: f64 = a.iter().zip(u).map(|(x, y)| (x - y) * (x - y)).sum();
        if d < best_d - 1e-15 {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Distribution `Π₀` of the initial state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialDistribution {
    Point { x: Vec<f64> },
    Gaussian { mean: Vec<f64>, cov: Mat },
    Discrete { atoms: Vec<Vec<f64>>, probs: Vec<f64> },
}

impl InitialDistribution {
    pub fn dim(&self) -> usize {
        match self {
            InitialDistribution::Point { x } => x.len(),
            InitialDistribution::Gaussian { mean, .. } => mean.len(),
            InitialDistribution::Discrete { atoms, .. } => atoms.first().map_or(0, |a| a.len()),
        }
    }

    /// Draws one sample; Gaussian draws consume exactly `dim` normals.
    pub fn sample(&self, rng: &mut crate::numerics::PathRng, out: &mut [f64]) {
        match self {
            InitialDistribution::Point { x } => out.copy_from_slice(x),
            InitialDistribution::Gaussian { mean, cov } => {
                let root = psd_sqrt(cov);
                let z: Vec<f64> = (0..mean.len()).map(|_| std_normal(rng)).collect();
                out.copy_from_slice(mean);
                root.mul_vec_add(&z, out);
            }
            InitialDistribution::Discrete { atoms, probs } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = atoms.len() - 1;
                for (i, p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                out.copy_from_slice(&atoms[pick]);
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            InitialDistribution::Point { x } => x.clone(),
            InitialDistribution::Gaussian { mean, .. } => mean.clone(),
            InitialDistribution::Discrete { atoms, probs } => {
                let mut m = vec![0.0; self.dim()];
                for (a, p) in atoms.iter().zip(probs) {
                    for (mi, ai) in m.iter_mut().zip(a) {
                        *mi += p * ai;
                    }
                }
                m
            }
        }
    }

    fn check(&self, n: usize) -> Result<()> {
        let bad = |msg: &str| Err(TeamsError::MalformedProblem(format!("initial distribution: {msg}")));
        if self.dim() != n {
            return bad("dimension differs from state_dim");
        }
        match self {
            InitialDistribution::Point { x } if x.iter().any(|v| !v.is_finite()) => bad("non-finite point"),
            InitialDistribution::Gaussian { cov, .. } => {
                if cov.rows() != n || cov.cols() != n || !cov.is_symmetric(1e-9) {
                    return bad("covariance must be symmetric n×n");
                }
                let min_ev = cov.to_nalgebra().symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
                if min_ev < -1e-12 {
                    return bad("covariance is not positive semidefinite");
                }
                Ok(())
            }
            InitialDistribution::Discrete { atoms, probs } => {
                if atoms.len() != probs.len() || atoms.is_empty() {
                    return bad("atoms and probabilities must be nonempty and aligned");
                }
                if probs.iter().any(|p| *p < 0.0) || (probs.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return bad("probabilities must be nonnegative and sum to 1");
                }
                if atoms.iter().any(|a| a.len() != n) {
                    return bad("atom dimension differs from state_dim");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

fn psd_sqrt(cov: &Mat) -> Mat {
    let eig = cov.to_nalgebra().symmetric_eigen();
    let d = nalgebra::DMatrix::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    Mat::from_nalgebra(&(&eig.eigenvectors * d * eig.eigenvectors.transpose()))
}

/// Continuous- or discrete-time dynamics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Flavor {
    /// `dx = f dt + σ dW`, `dyⁱ = hⁱ dt + Dⁱ^{1/2} dBⁱ` on `[0, horizon]`.
    ContinuousTime { horizon: f64, noise_dim: usize, diffusion: DiffusionFamily },
    /// `x(t+1) = f(t, x(t), u(t)) + G w(t+1)`, `yⁱ(t) = hⁱ(t, x(t), u(t−1)) + Dⁱ^{1/2} bⁱ(t)`.
    DiscreteTime { stages: usize, gain: Mat },
}

/// How the problem author vouches for joint convexity of the Hamiltonian.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexityDeclaration {
    /// Certify from the named families (affine dynamics, convex quadratic costs,
    /// decision-independent information).
    #[default]
    Auto,
    Convex,
    Nonconvex,
}

/// One decision maker: its actions, observation channel and information.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionMaker {
    pub action: ActionSpec,
    pub observation: VectorFamily,
    pub noise_scale: Mat,
    pub information: InformationStructure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeamProblem {
    #[serde(default)]
    pub name: String,
    pub flavor: Flavor,
    pub state_dim: usize,
    pub drift: VectorFamily,
    pub dms: Vec<DecisionMaker>,
    pub running_cost: ScalarFamily,
    pub terminal_cost: ScalarFamily,
    pub initial: InitialDistribution,
    #[serde(default)]
    pub convexity: ConvexityDeclaration,
}

/// Derived factorizations shared by simulation and weighting.
#[derive(Debug, Clone)]
pub struct Factors {
    pub noise: Vec<SpdFactors>,
    /// `(G⁻¹, log|det G|)` for the discrete flavor.
    pub gain: Option<(Mat, f64)>,
}

impl TeamProblem {
    pub fn dm_count(&self) -> usize {
        self.dms.len()
    }

    pub fn action_dims(&self) -> Vec<usize> {
        self.dms.iter().map(|d| d.action.dim).collect()
    }

    /// Offsets of each DM's block inside the joint action vector.
    pub fn action_offsets(&self) -> Vec<usize> {
        let mut acc = 0;
        self.dms
            .iter()
            .map(|d| {
                let o = acc;
                acc += d.action.dim;
                o
            })
            .collect()
    }

    pub fn joint_action_dim(&self) -> usize {
        self.dms.iter().map(|d| d.action.dim).sum()
    }

    pub fn obs_dims(&self) -> Vec<usize> {
        self.dms.iter().map(|d| d.observation.dim()).collect()
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.flavor, Flavor::DiscreteTime { .. })
    }

    pub fn horizon(&self) -> f64 {
        match &self.flavor {
            Flavor::ContinuousTime { horizon, .. } => *horizon,
            Flavor::DiscreteTime { stages, .. } => *stages as f64,
        }
    }

    pub fn noise_dim(&self) -> usize {
        match &self.flavor {
            Flavor::ContinuousTime { noise_dim, .. } => *noise_dim,
            Flavor::DiscreteTime { .. } => self.state_dim,
        }
    }

    pub fn factors(&self) -> Result<Factors> {
        let noise = self
            .dms
            .iter()
            .enumerate()
            .map(|(i, d)| d.noise_scale.spd_factors().ok_or(TeamsError::SingularNoise { dm: i }))
            .collect::<Result<Vec<_>>>()?;
        let gain = match &self.flavor {
            Flavor::DiscreteTime { gain, .. } => {
                Some(gain.inverse_and_logdet().ok_or(TeamsError::SingularGain { stage: 0 })?)
            }
            Flavor::ContinuousTime { .. } => None,
        };
        Ok(Factors { noise, gain })
    }

    /// Structural checks that make every other operation well defined.
    pub fn check_shapes(&self) -> Result<()> {
        let n = self.state_dim;
        let du = self.joint_action_dim();
        let bad = |msg: String| Err(TeamsError::MalformedProblem(msg));
        if n == 0 {
            return bad("state_dim must be positive".into());
        }
        if self.dms.is_empty() {
            return bad("at least one decision maker is required".into());
        }
        for (i, d) in self.dms.iter().enumerate() {
            d.action.check(i)?;
            let k = d.noise_scale.rows();
            if !d.noise_scale.is_square() {
                return bad(format!("noise scale of DM {i} is not square"));
            }
            check_vector_family(&d.observation, k, n, du, &format!("observation map of DM {i}"))?;
        }
        check_vector_family(&self.drift, n, n, du, "drift")?;
        check_scalar_family(&self.running_cost, n, du, "running cost")?;
        check_scalar_family(&self.terminal_cost, n, 0, "terminal cost")?;
        self.initial.check(n)?;
        match &self.flavor {
            Flavor::ContinuousTime { horizon, noise_dim, diffusion } => {
                if !(horizon.is_finite() && *horizon > 0.0) {
                    return bad("horizon must be positive".into());
                }
                if diffusion.shape() != (n, *noise_dim) {
                    return bad(format!(
                        "diffusion is {:?}, expected ({n}, {noise_dim})",
                        diffusion.shape()
                    ));
                }
            }
            Flavor::DiscreteTime { stages, gain } => {
                if *stages == 0 {
                    return bad("discrete problems need at least one stage".into());
                }
                if gain.rows() != n || gain.cols() != n {
                    return bad("gain must be n×n".into());
                }
            }
        }
        // Probe evaluation: output sizes must match the declared dimensions.
        let x = vec![0.1; n];
        let u = vec![0.1; du];
        let mut out = vec![0.0; n];
        self.drift.eval(0.0, &x, &u, &mut out);
        for (i, d) in self.dms.iter().enumerate() {
            let mut o = vec![0.0; d.noise_scale.rows()];
            d.observation.eval(0.0, &x, &u, &mut o);
            if o.iter().any(|v| !v.is_finite()) {
                return bad(format!("observation map of DM {i} is not finite at the probe point"));
            }
        }
        if !self.running_cost.eval(0.0, &x, &u).is_finite() || !self.terminal_cost.eval(0.0, &x, &[]).is_finite() {
            return bad("costs are not finite at the probe point".into());
        }
        let grid = crate::simulate::TimeGrid::with_steps(self.horizon(), 4);
        let obs_dims = self.obs_dims();
        for (i, d) in self.dms.iter().enumerate() {
            match CompiledInformation::compile(&d.information, i, &grid, &obs_dims, n) {
                Ok(_) | Err(TeamsError::IncompatibleStencil(_)) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

fn check_vector_family(f: &VectorFamily, dim: usize, n: usize, du: usize, what: &str) -> Result<()> {
    let bad = |msg: String| Err(TeamsError::MalformedProblem(format!("{what}: {msg}")));
    if f.dim() != dim {
        return bad(format!("output dimension {} but {dim} declared", f.dim()));
    }
    match f {
        VectorFamily::Linear { a, b, c } | VectorFamily::Bilinear { a, b, c, .. } | VectorFamily::Saturation { a, b, c, .. } => {
            if a.cols() != n {
                return bad(format!("state matrix has {} columns, expected {n}", a.cols()));
            }
            if let Some(b) = b {
                if b.rows() != dim || b.cols() != du {
                    return bad(format!("action matrix is {}×{}, expected {dim}×{du}", b.rows(), b.cols()));
                }
            }
            if c.as_ref().is_some_and(|c| c.len() != dim) {
                return bad("offset length differs from output dimension".into());
            }
            if let VectorFamily::Saturation { scale, .. } = f {
                if scale.len() != dim {
                    return bad("scale length differs from output dimension".into());
                }
            }
            if let VectorFamily::Bilinear { terms, .. } = f {
                if terms.iter().any(|t| t.out >= dim || t.x >= n || t.u >= du) {
                    return bad("bilinear term index out of range".into());
                }
            }
            Ok(())
        }
        VectorFamily::TimeSwitched { switch_times, pieces } => {
            if pieces.len() != switch_times.len() + 1 {
                return bad("need exactly one more piece than switch times".into());
            }
            pieces.iter().try_for_each(|p| check_vector_family(p, dim, n, du, what))
        }
        VectorFamily::Zero { .. } | VectorFamily::Custom(_) => Ok(()),
    }
}

fn check_scalar_family(f: &ScalarFamily, n: usize, du: usize, what: &str) -> Result<()> {
    let bad = |msg: &str| Err(TeamsError::MalformedProblem(format!("{what}: {msg}")));
    match f {
        ScalarFamily::Quadratic { xx, uu, xu, gx, gu, .. } => {
            if xx.as_ref().is_some_and(|m| m.rows() != n || m.cols() != n) {
                return bad("xx must be n×n");
            }
            if uu.as_ref().is_some_and(|m| m.rows() != du || m.cols() != du) {
                return bad("uu must match the joint action dimension");
            }
            if xu.as_ref().is_some_and(|m| m.rows() != n || m.cols() != du) {
                return bad("xu must be n×du");
            }
            if gx.as_ref().is_some_and(|g| g.len() != n) || gu.as_ref().is_some_and(|g| g.len() != du) {
                return bad("linear coefficients have the wrong length");
            }
            Ok(())
        }
        ScalarFamily::TimeSwitched { switch_times, pieces } => {
            if pieces.len() != switch_times.len() + 1 {
                return bad("need exactly one more piece than switch times");
            }
            pieces.iter().try_for_each(|p| check_scalar_family(p, n, du, what))
        }
        _ => Ok(()),
    }
}

/// Outcome of one sampled assumption check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    pub id: String,
    pub description: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub checks: Vec<AssumptionCheck>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, id: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.id == id)
    }
}

pub(crate) const PROBE_SEED: u64 = 0x5eed_0f_9a0be;
const PROBE_PAIRS: usize = 64;
const LIPSCHITZ_LIMIT: f64 = 1e6;

/// Spot-checks the standing assumptions at sampled probe points.
pub fn validate(problem: &TeamProblem) -> Result<ValidationReport> {
    problem.check_shapes()?;
    let factors_noise = problem
        .dms
        .iter()
        .enumerate()
        .map(|(i, d)| d.noise_scale.spd_factors().ok_or(TeamsError::SingularNoise { dm: i }))
        .collect::<Result<Vec<_>>>()?;
    let n = problem.state_dim;
    let du = problem.joint_action_dim();
    let mut checks = Vec::new();

    checks.push(AssumptionCheck {
        id: "A0".into(),
        description: "action sets closed, bounded and nonempty".into(),
        passed: true,
        detail: format!("{} action sets", problem.dm_count()),
    });
    checks.push(AssumptionCheck {
        id: "dims".into(),
        description: "coefficient output dimensions match n, m, k_i".into(),
        passed: true,
        detail: format!("n={n}, du={du}, k={:?}", problem.obs_dims()),
    });
    let max_cond = factors_noise
        .iter()
        .map(|f| {
            let ev = f.inv.to_nalgebra().symmetric_eigen().eigenvalues;
            ev.iter().cloned().fold(0.0, f64::max) / ev.iter().cloned().fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    checks.push(AssumptionCheck {
        id: "A8".into(),
        description: "observation noise scales positive definite with finite inverse square root".into(),
        passed: factors_noise.iter().all(|f| f.inv_sqrt.all_finite()),
        detail: format!("max condition number {max_cond:.3e}"),
    });
    if let Flavor::DiscreteTime { gain, .. } = &problem.flavor {
        let ok = gain.inverse_and_logdet().is_some();
        checks.push(AssumptionCheck {
            id: "gain".into(),
            description: "discrete state gain invertible".into(),
            passed: ok,
            detail: if ok { "invertible".into() } else { "singular".into() },
        });
    }

    // Probe points: pairs of (x, u) drawn from a fixed stream; actions inside A^i.
    let mut rng = path_stream(PROBE_SEED, StreamDomain::Probe, 0);
    let probe = |rng: &mut crate::numerics::PathRng, radius: f64| -> (f64, Vec<f64>, Vec<f64>) {
        let t = rng.random::<f64>() * problem.horizon();
        let x: Vec<f64> = (0..n).map(|_| radius * std_normal(rng)).collect();
        let mut u = Vec::with_capacity(du);
        for d in &problem.dms {
            let mut ui: Vec<f64> = (0..d.action.dim).map(|_| std_normal(rng)).collect();
            let mut pinned = vec![false; ui.len()];
            d.action.project(&mut ui, &mut pinned);
            u.extend(ui);
        }
        (t, x, u)
    };

    let mut sup_near = vec![0.0_f64; problem.dm_count()];
    let mut sup_far = vec![0.0_f64; problem.dm_count()];
    let mut lip_f = 0.0_f64;
    let mut lip_h = 0.0_f64;
    let mut lip_sigma = 0.0_f64;
    let mut finite = true;
    for _ in 0..PROBE_PAIRS {
        let (t, x1, u1) = probe(&mut rng, 1.0);
        let (_, x2, u2) = probe(&mut rng, 1.0);
        let (_, xf, uf) = probe(&mut rng, 100.0);
        let dist = x1.iter().zip(&x2).chain(u1.iter().zip(&u2)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        problem.drift.eval(t, &x1, &u1, &mut a);
        problem.drift.eval(t, &x2, &u2, &mut b);
        finite &= a.iter().chain(&b).all(|v| v.is_finite());
        lip_f = lip_f.max(norm_diff(&a, &b) / dist.max(1e-300));
        for (i, d) in problem.dms.iter().enumerate() {
            let k = d.observation.dim();
            let (mut ha, mut hb, mut hf) = (vec![0.0; k], vec![0.0; k], vec![0.0; k]);
            d.observation.eval(t, &x1, &u1, &mut ha);
            d.observation.eval(t, &x2, &u2, &mut hb);
            d.observation.eval(t, &xf, &uf, &mut hf);
            finite &= ha.iter().chain(&hb).chain(&hf).all(|v| v.is_finite());
            lip_h = lip_h.max(norm_diff(&ha, &hb) / dist.max(1e-300));
            sup_near[i] = sup_near[i].max(norm(&ha)).max(norm(&hb));
            sup_far[i] = sup_far[i].max(norm(&hf));
        }
        if let Flavor::ContinuousTime { diffusion, noise_dim, .. } = &problem.flavor {
            let mut sa = Mat::zeros(n, *noise_dim);
            let mut sb = Mat::zeros(n, *noise_dim);
            diffusion.eval(t, &x1, &u1, &mut sa);
            diffusion.eval(t, &x2, &u2, &mut sb);
            finite &= sa.all_finite() && sb.all_finite();
            lip_sigma = lip_sigma.max(norm_diff(sa.as_slice(), sb.as_slice()) / dist.max(1e-300));
        }
        finite &= problem.running_cost.eval(t, &x1, &u1).is_finite();
        finite &= problem.terminal_cost.eval(t, &x1, &[]).is_finite();
    }
    checks.push(AssumptionCheck {
        id: "finite".into(),
        description: "coefficients finite at probe points".into(),
        passed: finite,
        detail: format!("{PROBE_PAIRS} probe pairs"),
    });
    checks.push(AssumptionCheck {
        id: "A1-A2".into(),
        description: "drift and diffusion Lipschitz (sampled difference quotients)".into(),
        passed: lip_f.is_finite() && lip_f <= LIPSCHITZ_LIMIT && lip_sigma <= LIPSCHITZ_LIMIT,
        detail: format!("drift ratio {lip_f:.3e}, diffusion ratio {lip_sigma:.3e}"),
    });
    checks.push(AssumptionCheck {
        id: "A4".into(),
        description: "observation maps Lipschitz (sampled difference quotients)".into(),
        passed: lip_h.is_finite() && lip_h <= LIPSCHITZ_LIMIT,
        detail: format!("ratio {lip_h:.3e}"),
    });
    // Bounded observation maps keep |h| flat between radius 1 and radius 100.
    let bounded = sup_near.iter().zip(&sup_far).all(|(near, far)| *far <= 10.0 * near.max(1.0));
    checks.push(AssumptionCheck {
        id: "A5'".into(),
        description: "observation maps bounded on the probe grid".into(),
        passed: bounded,
        detail: format!("sup |h| at radius 1: {sup_near:?}, at radius 100: {sup_far:?}"),
    });
    Ok(ValidationReport { checks })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn degenerate_scalar() -> TeamProblem {
        TeamProblem {
            name: "degenerate".into(),
            flavor: Flavor::ContinuousTime {
                horizon: 1.0,
                noise_dim: 1,
                diffusion: DiffusionFamily::Constant { s: Mat::scalar(1.0) },
            },
            state_dim: 1,
            drift: VectorFamily::Zero { dim: 1 },
            dms: vec![DecisionMaker {
                action: ActionSpec::interval(-1.0, 1.0),
                observation: VectorFamily::Zero { dim: 1 },
                noise_scale: Mat::scalar(1.0),
                information: InformationStructure::own_history(),
            }],
            running_cost: ScalarFamily::zero(),
            terminal_cost: ScalarFamily::zero(),
            initial: InitialDistribution::Point { x: vec![0.0] },
            convexity: ConvexityDeclaration::Auto,
        }
    }

    #[test]
    fn degenerate_problem_passes_everything() {
        let report = validate(&degenerate_scalar()).unwrap();
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn zero_noise_scale_is_singular() {
        let mut p = degenerate_scalar();
        p.dms[0].noise_scale = Mat::zeros(1, 1);
        assert_eq!(validate(&p).unwrap_err(), TeamsError::SingularNoise { dm: 0 });
    }

    #[test]
    fn observation_dimension_mismatch_is_malformed() {
        let mut p = degenerate_scalar();
        p.dms[0].observation = VectorFamily::Zero { dim: 2 };
        assert!(matches!(validate(&p).unwrap_err(), TeamsError::MalformedProblem(_)));
    }

    #[test]
    fn unbounded_action_set_is_malformed() {
        let mut p = degenerate_scalar();
        p.dms[0].action = ActionSpec::interval(f64::NEG_INFINITY, 1.0);
        assert!(matches!(validate(&p).unwrap_err(), TeamsError::MalformedProblem(_)));
    }

    #[test]
    fn linear_observation_flagged_unbounded() {
        let mut p = degenerate_scalar();
        p.dms[0].observation = VectorFamily::scalar_linear(1.0, &[], 0.0);
        let report = validate(&p).unwrap();
        assert!(!report.get("A5'").unwrap().passed);
        let mut q = degenerate_scalar();
        q.dms[0].observation = VectorFamily::Saturation { a: Mat::scalar(1.0), b: None, c: None, scale: vec![1.0] };
        assert!(validate(&q).unwrap().get("A5'").unwrap().passed);
    }

    #[test]
    fn validate_is_pure() {
        let p = degenerate_scalar();
        assert_eq!(validate(&p).unwrap(), validate(&p).unwrap());
    }

    #[test]
    fn problem_json_round_trip() {
        let p = degenerate_scalar();
        let s = serde_json::to_string_pretty(&p).unwrap();
        let back: TeamProblem = serde_json::from_str(&s).unwrap();
        assert_eq!(serde_json::to_string_pretty(&back).unwrap(), s);
    }

    #[test]
    fn unknown_fields_rejected() {
        let p = degenerate_scalar();
        let mut v = serde_json::to_value(&p).unwrap();
        v["surprise"] = serde_json::json!(1);
        assert!(serde_json::from_value::<TeamProblem>(v).is_err());
    }

    #[test]
    fn box_projection_pins_active_bounds() {
        let spec = ActionSpec::interval(-1.0, 1.0);
        let mut u = [1.5];
        let mut pinned = [false];
        spec.project(&mut u, &mut pinned);
        assert_eq!((u[0], pinned[0]), (1.0, true));
        let mut g = [-2.0];
        spec.project_gradient(&u, &mut g);
        assert_eq!(g[0], 0.0);
        let mut g = [2.0];
        spec.project_gradient(&u, &mut g);
        assert_eq!(g[0], 2.0);
    }
}
