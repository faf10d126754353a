//! The two-stage Witsenhausen counterexample.
//!
//! `x₁ = x₀ + γ₁(x₀)`, `y₁ = x₁ + v`, `x₂ = x₁ − γ₂(y₁)`, cost
//! `E[k² γ₁(x₀)² + x₂²]` with `x₀ ~ N(0, σ₀²)` and `v ~ N(0, σ_v²)`.
//! Policies are tabulated on fixed grids and every expectation is a
//! trapezoid sum over those grids, so nothing here is random except the
//! restarts of the brute-force oracle.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeamsError};
use crate::linalg::Mat;
use crate::numerics::{path_stream, std_normal_cdf, std_normal_pdf, StreamDomain};
use crate::policy::{Basis, Policy, PolicyProfile, RegularPolicy};
use crate::problem::{
    ActionSpec, ConvexityDeclaration, DecisionMaker, Flavor, InformationStructure, InitialDistribution, Sample,
    ScalarFamily, TeamProblem, VectorFamily,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WitsenhausenSpec {
    pub k: f64,
    pub sigma0: f64,
    pub sigmav: f64,
    /// Nodes per grid (even, so that 0 is never a node and odd policies stay odd).
    #[serde(default = "default_nodes")]
    pub nodes: usize,
    /// Grid half-width in standard deviations.
    #[serde(default = "default_range")]
    pub range: f64,
}

fn default_nodes() -> usize {
    400
}

fn default_range() -> f64 {
    8.0
}

impl WitsenhausenSpec {
    pub fn new(k: f64, sigma0: f64, sigmav: f64) -> Result<Self> {
        let s = WitsenhausenSpec { k, sigma0, sigmav, nodes: default_nodes(), range: default_range() };
        s.check()?;
        Ok(s)
    }

    pub fn check(&self) -> Result<()> {
        for (name, v) in [("k", self.k), ("sigma0", self.sigma0), ("sigmav", self.sigmav)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TeamsError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        if self.nodes < 8 {
            return Err(TeamsError::InvalidArgument("at least 8 grid nodes are needed".into()));
        }
        if !(self.range >= 3.0) {
            return Err(TeamsError::InvalidArgument("grids must cover at least 6 standard deviations".into()));
        }
        Ok(())
    }

    /// Grid of `x₀`.
    pub fn x_grid(&self) -> Vec<f64> {
        uniform(self.range * self.sigma0, self.nodes)
    }

    /// Grid of `y₁`, wide enough for `|x₁| ≤ 2|x₀|` plus noise.
    pub fn y_grid(&self) -> Vec<f64> {
        uniform(self.range * (2.0 * self.sigma0 + self.sigmav), self.nodes)
    }

    fn with_nodes(&self, nodes: usize) -> Self {
        WitsenhausenSpec { nodes, ..self.clone() }
    }
}

fn uniform(half: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| -half + 2.0 * half * i as f64 / (n - 1) as f64).collect()
}

fn trapezoid_weights(grid: &[f64]) -> Vec<f64> {
    let h = grid[1] - grid[0];
    let n = grid.len();
    (0..n).map(|i| if i == 0 || i == n - 1 { 0.5 * h } else { h }).collect()
}

/// Linear interpolation with flat extrapolation.
pub fn interpolate(grid: &[f64], values: &[f64], z: f64) -> f64 {
    let n = grid.len();
    if z <= grid[0] {
        return values[0];
    }
    if z >= grid[n - 1] {
        return values[n - 1];
    }
    let h = grid[1] - grid[0];
    let i = (((z - grid[0]) / h).floor() as usize).min(n - 2);
    let s = (z - grid[i]) / h;
    values[i] * (1.0 - s) + values[i + 1] * s
}

fn gauss(z: f64, sigma: f64) -> f64 {
    std_normal_pdf(z / sigma) / sigma
}

/// `γ₁` on the `x₀` grid and `γ₂` on the `y₁` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePolicies {
    pub gamma1: Vec<f64>,
    pub gamma2: Vec<f64>,
}

impl StagePolicies {
    pub fn zero(spec: &WitsenhausenSpec) -> Self {
        StagePolicies { gamma1: vec![0.0; spec.nodes], gamma2: vec![0.0; spec.nodes] }
    }

    /// `γ₁(x₀) = a x₀`, `γ₂(y₁) = b y₁`.
    pub fn affine(spec: &WitsenhausenSpec, a: f64, b: f64) -> Self {
        StagePolicies {
            gamma1: spec.x_grid().iter().map(|x| a * x).collect(),
            gamma2: spec.y_grid().iter().map(|y| b * y).collect(),
        }
    }

    pub fn check(&self, spec: &WitsenhausenSpec) -> Result<()> {
        if self.gamma1.len() != spec.nodes || self.gamma2.len() != spec.nodes {
            return Err(TeamsError::ShapeMismatch(format!(
                "policies must have {} nodes, got {} and {}",
                spec.nodes,
                self.gamma1.len(),
                self.gamma2.len()
            )));
        }
        if self.gamma1.iter().chain(&self.gamma2).any(|v| !v.is_finite()) {
            return Err(TeamsError::InvalidArgument("policy values must be finite".into()));
        }
        Ok(())
    }

    /// Re-tabulates on another spec's grids by interpolation.
    pub fn regrid(&self, from: &WitsenhausenSpec, to: &WitsenhausenSpec) -> Self {
        let (xf, yf) = (from.x_grid(), from.y_grid());
        StagePolicies {
            gamma1: to.x_grid().iter().map(|x| interpolate(&xf, &self.gamma1, *x)).collect(),
            gamma2: to.y_grid().iter().map(|y| interpolate(&yf, &self.gamma2, *y)).collect(),
        }
    }
}

/// Precomputed quadrature of one spec.
struct Quadrature {
    k2: f64,
    sigmav: f64,
    xs: Vec<f64>,
    /// `p₀(x₀) · weight` per `x₀` node.
    px: Vec<f64>,
    ys: Vec<f64>,
    wy: Vec<f64>,
    /// Half-width of the `y` window around `x₁` that carries the noise density.
    window: f64,
}

/// Sums over the `y` nodes near `x₁` of `w · λ_v(y − x₁)` times
/// `(1, x₁ − γ₂, (x₁ − γ₂)², (y − x₁)/σ_v² · (x₁ − γ₂)²)`.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    s0: f64,
    s1: f64,
    s2: f64,
    s3: f64,
}

impl Quadrature {
    fn new(spec: &WitsenhausenSpec) -> Self {
        let xs = spec.x_grid();
        let wx = trapezoid_weights(&xs);
        let px = xs.iter().zip(&wx).map(|(x, w)| w * gauss(*x, spec.sigma0)).collect();
        let ys = spec.y_grid();
        let wy = trapezoid_weights(&ys);
        Quadrature { k2: spec.k * spec.k, sigmav: spec.sigmav, xs, px, ys, wy, window: 9.0 * spec.sigmav }
    }

    fn y_range(&self, x1: f64) -> std::ops::Range<usize> {
        let h = self.ys[1] - self.ys[0];
        let n = self.ys.len();
        let lo = ((x1 - self.window - self.ys[0]) / h).floor().max(0.0) as usize;
        let hi = (((x1 + self.window - self.ys[0]) / h).ceil().max(0.0) as usize + 1).min(n);
        lo.min(n)..hi
    }

    fn moments(&self, x1: f64, gamma2: &[f64]) -> Moments {
        let mut m = Moments::default();
        let iv = 1.0 / (self.sigmav * self.sigmav);
        for j in self.y_range(x1) {
            let v = self.ys[j] - x1;
            let w = self.wy[j] * gauss(v, self.sigmav);
            let e = x1 - gamma2[j];
            m.s0 += w;
            m.s1 += w * e;
            m.s2 += w * e * e;
            m.s3 += w * v * iv * e * e;
        }
        m
    }

    /// Conditional cost of playing `u` at `x₀` against `γ₂`.
    fn cost(&self, x0: f64, u: f64, gamma2: &[f64]) -> f64 {
        let m = self.moments(x0 + u, gamma2);
        self.k2 * u * u + if m.s0 > 0.0 { m.s2 / m.s0 } else { 0.0 }
    }

    /// Derivative of [`Self::cost`] in `u`, in the score form of the
    /// stationarity condition.
    fn stationarity(&self, x0: f64, u: f64, gamma2: &[f64]) -> f64 {
        let m = self.moments(x0 + u, gamma2);
        if m.s0 <= 0.0 {
            return 2.0 * self.k2 * u;
        }
        2.0 * self.k2 * u + m.s3 / m.s0 + 2.0 * m.s1 / m.s0
    }

    fn payoff(&self, p: &StagePolicies) -> f64 {
        let parts: Vec<f64> = (0..self.xs.len())
            .into_par_iter()
            .map(|i| {
                let u = p.gamma1[i];
                let m = self.moments(self.xs[i] + u, &p.gamma2);
                self.px[i] * (self.k2 * u * u + m.s2)
            })
            .collect();
        crate::numerics::pairwise_sum(&parts)
    }

    /// `E[x₁ | y₁]` on every `y` node, and the marginal density of `y₁`.
    fn conditional_mean(&self, gamma1: &[f64]) -> (Vec<f64>, Vec<f64>) {
        self.ys
            .par_iter()
            .map(|&y| {
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..self.xs.len() {
                    let x1 = self.xs[i] + gamma1[i];
                    let w = self.px[i] * gauss(y - x1, self.sigmav);
                    num += w * x1;
                    den += w;
                }
                (if den > 0.0 { num / den } else { 0.0 }, den)
            })
            .unzip()
    }
}

/// Quadrature payoff.
///
/// Logs a `GridTooCoarse` warning when doubling the node count moves the value
/// by more than 10⁻³ relative.
pub fn wits_payoff(spec: &WitsenhausenSpec, policies: &StagePolicies) -> Result<f64> {
    let (value, coarse) = wits_payoff_checked(spec, policies)?;
    if coarse {
        log::warn!("GridTooCoarse: Witsenhausen payoff changes by more than 1e-3 when the grid is doubled");
    }
    Ok(value)
}

/// Quadrature payoff and whether the grid was found too coarse.
pub fn wits_payoff_checked(spec: &WitsenhausenSpec, policies: &StagePolicies) -> Result<(f64, bool)> {
    spec.check()?;
    policies.check(spec)?;
    let value = Quadrature::new(spec).payoff(policies);
    let fine = spec.with_nodes(2 * spec.nodes);
    let refined = Quadrature::new(&fine).payoff(&policies.regrid(spec, &fine));
    Ok((value, (refined - value).abs() > 1e-3 * value.abs().max(1e-12)))
}

/// Best `b` for `γ₁ = a x₀`: `Cov(x₁, y₁) / Var(y₁)`.
pub fn affine_gain(spec: &WitsenhausenSpec, a: f64) -> f64 {
    let s = (1.0 + a) * (1.0 + a) * spec.sigma0 * spec.sigma0;
    s / (s + spec.sigmav * spec.sigmav)
}

/// Best affine pair over `a ∈ [−2, 1]`: a 61-point scan followed by golden
/// section on the best bracket, with `b` in closed form.
pub fn wits_affine_baseline(spec: &WitsenhausenSpec) -> Result<((f64, f64), f64)> {
    spec.check()?;
    let q = Quadrature::new(spec);
    let j = |a: f64| q.payoff(&StagePolicies::affine(spec, a, affine_gain(spec, a)));
    let (lo, hi) = (-2.0, 1.0);
    let n = 61;
    let grid: Vec<f64> = (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|a| j(*a)).collect();
    let best = (0..n).fold(0, |b, i| if vals[i] < vals[b] { i } else { b });
    let (mut a, mut b) = (grid[best.saturating_sub(1)], grid[(best + 1).min(n - 1)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (j(c), j(d));
    while (b - a).abs() > 1e-9 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = j(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = j(d);
        }
    }
    let a_star = 0.5 * (a + b);
    let mut out = (a_star, j(a_star));
    if vals[best] < out.1 {
        out = (grid[best], vals[best]);
    }
    Ok(((out.0, affine_gain(spec, out.0)), out.1))
}

/// Stationarity residuals of the two stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WitsResidual {
    pub iteration: usize,
    /// `sup |γ₁ − T₁(γ₁)|` over `x₀` nodes with non-negligible prior mass,
    /// where `T₁` is the right-hand side of the first-stage equation.
    pub stage1: f64,
    /// `sup |γ₂ − E[x₁ | y₁]|` over `y₁` nodes with non-negligible marginal mass.
    pub stage2: f64,
    /// Sup-norm of the policy change in this iteration.
    pub change: f64,
    pub payoff: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedPoint {
    pub policies: StagePolicies,
    pub trace: Vec<WitsResidual>,
    pub converged: bool,
}

const MASS_FLOOR: f64 = 1e-8;

/// Residuals of the stationarity equations for both stages.
pub fn wits_residuals(spec: &WitsenhausenSpec, p: &StagePolicies) -> Result<(f64, f64)> {
    spec.check()?;
    p.check(spec)?;
    let q = Quadrature::new(spec);
    Ok(residuals(&q, p))
}

fn residuals(q: &Quadrature, p: &StagePolicies) -> (f64, f64) {
    let pmax = q.px.iter().cloned().fold(0.0, f64::max);
    let stage1 = (0..q.xs.len())
        .into_par_iter()
        .filter(|&i| q.px[i] >= MASS_FLOOR * pmax)
        .map(|i| (q.stationarity(q.xs[i], p.gamma1[i], &p.gamma2) / (2.0 * q.k2)).abs())
        .reduce(|| 0.0, f64::max);
    let (mean, density) = q.conditional_mean(&p.gamma1);
    let dmax = density.iter().cloned().fold(0.0, f64::max);
    let stage2 = (0..q.ys.len())
        .filter(|&j| density[j] >= MASS_FLOOR * dmax)
        .map(|j| (p.gamma2[j] - mean[j]).abs())
        .fold(0.0, f64::max);
    (stage1, stage2)
}

fn bisect(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if (b - a).abs() <= 1e-12 * (1.0 + m.abs()) {
            return m;
        }
        let fm = f(m);
        if fm == 0.0 {
            return m;
        }
        if (fm > 0.0) == (fa > 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    0.5 * (a + b)
}

/// Pointwise first-stage response at `x₀`: the stationary point with the
/// lowest conditional cost among the damped iterate from `start` and every
/// root bracketed on a scan of `x₁`.
fn stage1_response(q: &Quadrature, x0: f64, start: f64, gamma2: &[f64], sigma0: f64) -> f64 {
    let g = |u: f64| q.stationarity(x0, u, gamma2);
    let scale = 2.0 * q.k2;
    let mut candidates = Vec::new();

    // Damped fixed-point iteration u ← ½u + ½T(u), T(u) = u − g(u)/(2k²).
    let mut u = start;
    for _ in 0..200 {
        let next = u - 0.5 * g(u) / scale;
        if (next - u).abs() <= 1e-12 * (1.0 + u.abs()) {
            u = next;
            break;
        }
        u = next;
    }
    if (g(u) / scale).abs() <= 1e-9 {
        candidates.push(u);
    }

    let lo = x0.min(-2.0 * sigma0) - sigma0;
    let hi = x0.max(2.0 * sigma0) + sigma0;
    let n = 64;
    let mut prev_u = lo - x0;
    let mut prev_g = g(prev_u);
    for s in 1..=n {
        let x1 = lo + (hi - lo) * s as f64 / n as f64;
        let cu = x1 - x0;
        let cg = g(cu);
        if (prev_g > 0.0) != (cg > 0.0) || cg == 0.0 {
            candidates.push(bisect(&g, prev_u, cu, prev_g));
        }
        prev_u = cu;
        prev_g = cg;
    }
    if candidates.is_empty() {
        candidates.push(u);
    }
    let mut best = candidates[0];
    let mut best_cost = q.cost(x0, best, gamma2);
    for &c in &candidates[1..] {
        let cc = q.cost(x0, c, gamma2);
        if cc < best_cost - 1e-14 * best_cost.abs().max(1.0) {
            best = c;
            best_cost = cc;
        }
    }
    best
}

/// Alternates `γ₂ ← E[x₁ | y₁]` and the pointwise first-stage response until
/// the sup-norm policy change is at most `tol`.
///
/// Each half-step minimizes the payoff over one stage, so the payoff never
/// increases. Without convergence the last iterate is returned with
/// `converged = false`.
pub fn wits_fixed_point(spec: &WitsenhausenSpec, init: &StagePolicies, max_iters: usize, tol: f64) -> Result<FixedPoint> {
    spec.check()?;
    init.check(spec)?;
    if !(tol > 0.0) {
        return Err(TeamsError::InvalidArgument("tolerance must be positive".into()));
    }
    let q = Quadrature::new(spec);
    let pmax = q.px.iter().cloned().fold(0.0, f64::max);
    let mut p = init.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    for it in 0..max_iters {
        let (gamma2, density) = q.conditional_mean(&p.gamma1);
        let dmax = density.iter().cloned().fold(0.0, f64::max);
        let gamma1: Vec<f64> = (0..q.xs.len())
            .into_par_iter()
            .map(|i| stage1_response(&q, q.xs[i], p.gamma1[i], &gamma2, spec.sigma0))
            .collect();
        let change1 = (0..q.xs.len())
            .filter(|&i| q.px[i] >= MASS_FLOOR * pmax)
            .map(|i| (gamma1[i] - p.gamma1[i]).abs())
            .fold(0.0, f64::max);
        let change2 = (0..q.ys.len())
            .filter(|&j| density[j] >= MASS_FLOOR * dmax)
            .map(|j| (gamma2[j] - p.gamma2[j]).abs())
            .fold(0.0, f64::max);
        p = StagePolicies { gamma1, gamma2 };
        let (stage1, stage2) = residuals(&q, &p);
        let change = change1.max(change2);
        trace.push(WitsResidual { iteration: it, stage1, stage2, change, payoff: q.payoff(&p) });
        log::debug!("witsenhausen iteration {it}: change {change:e}, residuals {stage1:e} {stage2:e}");
        if change <= tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("NoConvergence: Witsenhausen fixed point did not reach tolerance {tol:e} in {max_iters} iterations");
    }
    Ok(FixedPoint { policies: p, trace, converged })
}

/// Discretization of the brute-force oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoarseGrid {
    /// Number of `x₀` atoms (≤ 9): conditional means of equal-width bins.
    pub x_atoms: usize,
    /// Number of `y₁` bins (≤ 9), the outer two unbounded.
    pub y_bins: usize,
    /// Number of first-stage action atoms (≤ 15), equally spaced.
    pub action_atoms: usize,
    /// Half-width of the `x₀` bins and of the actions, in units of `σ₀`.
    pub x_range: f64,
    /// Half-width of the `y₁` bins in units of `√(σ₀² + σ_v²)`.
    pub y_range: f64,
    #[serde(default = "default_restarts")]
    pub restarts: usize,
    #[serde(default)]
    pub seed: u64,
    /// Maximum number of payoff evaluations.
    #[serde(default = "default_budget")]
    pub budget: usize,
}

fn default_restarts() -> usize {
    32
}

fn default_budget() -> usize {
    5_000_000
}

impl Default for CoarseGrid {
    fn default() -> Self {
        CoarseGrid {
            x_atoms: 9,
            y_bins: 9,
            action_atoms: 15,
            x_range: 3.0,
            y_range: 2.0,
            restarts: default_restarts(),
            seed: 0,
            budget: default_budget(),
        }
    }
}

/// The discretized problem: `x₀` atoms with probabilities, `y₁` bins, action atoms.
#[derive(Debug, Clone)]
pub struct CoarseProblem {
    pub k: f64,
    pub sigmav: f64,
    pub x: Vec<f64>,
    pub px: Vec<f64>,
    /// Interior bin edges.
    pub edges: Vec<f64>,
    pub actions: Vec<f64>,
}

impl CoarseProblem {
    pub fn new(spec: &WitsenhausenSpec, grid: &CoarseGrid) -> Result<Self> {
        spec.check()?;
        if grid.x_atoms == 0 || grid.x_atoms > 9 || grid.y_bins == 0 || grid.y_bins > 9 {
            return Err(TeamsError::InvalidArgument("coarse grids take 1..=9 x atoms and y bins".into()));
        }
        if grid.action_atoms == 0 || grid.action_atoms > 15 {
            return Err(TeamsError::InvalidArgument("coarse grids take 1..=15 action atoms".into()));
        }
        let s0 = spec.sigma0;
        let xe = interior_edges(grid.x_atoms, grid.x_range * s0);
        let mut x = Vec::new();
        let mut px = Vec::new();
        for b in 0..grid.x_atoms {
            let lo = if b == 0 { f64::NEG_INFINITY } else { xe[b - 1] / s0 };
            let hi = if b == grid.x_atoms - 1 { f64::INFINITY } else { xe[b] / s0 };
            let mass = std_normal_cdf(hi) - std_normal_cdf(lo);
            let pdf = |z: f64| if z.is_finite() { std_normal_pdf(z) } else { 0.0 };
            // E[x₀ | bin] = σ₀ (φ(lo) − φ(hi)) / mass.
            x.push(s0 * (pdf(lo) - pdf(hi)) / mass);
            px.push(mass);
        }
        let sy = (s0 * s0 + spec.sigmav * spec.sigmav).sqrt();
        let edges = interior_edges(grid.y_bins, grid.y_range * sy);
        let actions = if grid.action_atoms == 1 {
            vec![0.0]
        } else {
            uniform(grid.x_range * s0, grid.action_atoms)
        };
        Ok(CoarseProblem { k: spec.k, sigmav: spec.sigmav, x, px, edges, actions })
    }

    fn bin_probs(&self, x1: f64, out: &mut [f64]) {
        let n = self.edges.len() + 1;
        let cdf = |e: f64| std_normal_cdf((e - x1) / self.sigmav);
        for b in 0..n {
            let hi = if b == n - 1 { 1.0 } else { cdf(self.edges[b]) };
            let lo = if b == 0 { 0.0 } else { cdf(self.edges[b - 1]) };
            out[b] = (hi - lo).max(0.0);
        }
    }

    /// Exact best second stage for first-stage actions `u` (one per atom):
    /// the conditional mean of `x₁` in every bin.
    pub fn best_gamma2(&self, u: &[f64]) -> Vec<f64> {
        let nb = self.edges.len() + 1;
        let mut num = vec![0.0; nb];
        let mut den = vec![0.0; nb];
        let mut pb = vec![0.0; nb];
        for (a, &xa) in self.x.iter().enumerate() {
            let x1 = xa + u[a];
            self.bin_probs(x1, &mut pb);
            for b in 0..nb {
                num[b] += self.px[a] * pb[b] * x1;
                den[b] += self.px[a] * pb[b];
            }
        }
        (0..nb).map(|b| if den[b] > 0.0 { num[b] / den[b] } else { 0.0 }).collect()
    }

    pub fn payoff(&self, u: &[f64], gamma2: &[f64]) -> f64 {
        let nb = self.edges.len() + 1;
        let mut pb = vec![0.0; nb];
        let k2 = self.k * self.k;
        self.x
            .iter()
            .enumerate()
            .map(|(a, &xa)| {
                let x1 = xa + u[a];
                self.bin_probs(x1, &mut pb);
                let inner: f64 = (0..nb).map(|b| pb[b] * (x1 - gamma2[b]).powi(2)).sum();
                self.px[a] * (k2 * u[a] * u[a] + inner)
            })
            .sum()
    }

    /// Payoff of a first stage with the second stage chosen optimally.
    pub fn value(&self, u: &[f64]) -> f64 {
        self.payoff(u, &self.best_gamma2(u))
    }
}

fn interior_edges(bins: usize, half: f64) -> Vec<f64> {
    (1..bins).map(|i| -half + 2.0 * half * i as f64 / bins as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BruteForce {
    /// First-stage action per `x₀` atom.
    pub u1: Vec<f64>,
    /// Second-stage action per `y₁` bin.
    pub gamma2: Vec<f64>,
    pub payoff: f64,
    pub restarts_done: usize,
    pub evaluations: usize,
    /// Set when the evaluation budget ran out; the result is the best found so far.
    pub budget_exceeded: bool,
}

/// Best discrete local optimum over restarts.
///
/// The second stage is always the exact per-bin conditional mean. From each
/// start, single-atom changes of the first stage are applied while any improves
/// the payoff, so every returned point is verified against its whole
/// one-coordinate neighbourhood. Starts: all-zero, full cancellation, then
/// random atom tables from the restart stream.
pub fn wits_bruteforce(spec: &WitsenhausenSpec, grid: &CoarseGrid) -> Result<BruteForce> {
    let cp = CoarseProblem::new(spec, grid)?;
    let na = cp.x.len();
    let nu = cp.actions.len();
    let nearest = |v: f64| (0..nu).fold(0, |b, i| if (cp.actions[i] - v).abs() < (cp.actions[b] - v).abs() { i } else { b });
    let mut starts: Vec<Vec<usize>> = vec![vec![nearest(0.0); na], cp.x.iter().map(|x| nearest(-x)).collect()];
    for r in 0..grid.restarts.max(32) {
        let mut rng = path_stream(grid.seed, StreamDomain::Restart, r as u64);
        starts.push((0..na).map(|_| rng.random_range(0..nu)).collect());
    }

    let mut evaluations = 0usize;
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut done = 0;
    let mut exceeded = false;
    'outer: for start in starts {
        let mut idx = start;
        let to_u = |idx: &[usize]| idx.iter().map(|&i| cp.actions[i]).collect::<Vec<_>>();
        let mut current = cp.value(&to_u(&idx));
        evaluations += 1;
        loop {
            let mut improved = None;
            for a in 0..na {
                for c in 0..nu {
                    if c == idx[a] {
                        continue;
                    }
                    if evaluations >= grid.budget {
                        exceeded = true;
                        break 'outer;
                    }
                    let mut trial = idx.clone();
                    trial[a] = c;
                    let v = cp.value(&to_u(&trial));
                    evaluations += 1;
                    if v < current - 1e-15 && improved.as_ref().is_none_or(|(bv, _)| v < *bv) {
                        improved = Some((v, trial));
                    }
                }
            }
            match improved {
                Some((v, t)) => {
                    current = v;
                    idx = t;
                }
                None => break,
            }
        }
        done += 1;
        if best.as_ref().is_none_or(|(bv, _)| current < *bv) {
            best = Some((current, idx));
        }
    }
    if exceeded {
        log::warn!("BudgetExceeded: brute force stopped after {evaluations} evaluations");
    }
    let (payoff, idx) = best.ok_or(TeamsError::BudgetExceeded { evaluated: evaluations })?;
    let u1: Vec<f64> = idx.iter().map(|&i| cp.actions[i]).collect();
    let gamma2 = cp.best_gamma2(&u1);
    Ok(BruteForce { u1, gamma2, payoff, restarts_done: done, evaluations, budget_exceeded: exceeded })
}

/// Payoff on the coarse problem of tabulated policies: `γ₁` is read at each
/// `x₀` atom and snapped to the nearest action atom, `γ₂` is re-optimized per bin.
pub fn coarse_payoff(spec: &WitsenhausenSpec, grid: &CoarseGrid, policies: &StagePolicies) -> Result<f64> {
    policies.check(spec)?;
    let cp = CoarseProblem::new(spec, grid)?;
    let xs = spec.x_grid();
    let u: Vec<f64> = cp
        .x
        .iter()
        .map(|x| {
            let v = interpolate(&xs, &policies.gamma1, *x);
            cp.actions.iter().cloned().fold(cp.actions[0], |b, a| if (a - v).abs() < (b - v).abs() { a } else { b })
        })
        .collect();
    Ok(cp.value(&u))
}

/// Gain of the discrete-time formulation's state noise. The discrete flavor
/// needs a nonsingular gain, so the deterministic transitions carry this much noise.
pub const STATE_GAIN: f64 = 1e-6;

/// The benchmark as a two-stage discrete-time team with tabulated policies:
/// DM 1 reads `x(0)` and moves the state at stage 0, DM 2 reads
/// `y(1) = x(1) + σ_v b(1)` and subtracts its action at stage 1.
pub fn team_problem(spec: &WitsenhausenSpec, policies: &StagePolicies) -> Result<(TeamProblem, PolicyProfile)> {
    spec.check()?;
    policies.check(spec)?;
    let k2 = spec.k * spec.k;
    let bound = 4.0 * spec.range * (spec.sigma0 + spec.sigmav);
    let problem = TeamProblem {
        name: "witsenhausen".into(),
        flavor: Flavor::DiscreteTime { stages: 2, gain: Mat::scalar(STATE_GAIN) },
        state_dim: 1,
        drift: VectorFamily::TimeSwitched {
            switch_times: vec![1.0],
            pieces: vec![VectorFamily::scalar_linear(1.0, &[1.0, 0.0], 0.0), VectorFamily::scalar_linear(1.0, &[0.0, -1.0], 0.0)],
        },
        dms: vec![
            DecisionMaker {
                action: ActionSpec::interval(-bound, bound),
                observation: VectorFamily::Zero { dim: 1 },
                noise_scale: Mat::scalar(1.0),
                information: InformationStructure::Snapshot { stencil: vec![Sample::State { lag: 0.0 }] },
            },
            DecisionMaker {
                action: ActionSpec::interval(-bound, bound),
                observation: VectorFamily::scalar_linear(1.0, &[0.0, 0.0], 0.0),
                noise_scale: Mat::scalar(spec.sigmav),
                information: InformationStructure::current_observation(1),
            },
        ],
        running_cost: ScalarFamily::TimeSwitched {
            switch_times: vec![1.0],
            pieces: vec![ScalarFamily::quadratic(None, Some(Mat::diag(&[k2, 0.0])), None), ScalarFamily::zero()],
        },
        terminal_cost: ScalarFamily::state_quadratic(Some(Mat::scalar(1.0)), None, 0.0),
        initial: InitialDistribution::Gaussian { mean: vec![0.0], cov: Mat::scalar(spec.sigma0 * spec.sigma0) },
        convexity: ConvexityDeclaration::Nonconvex,
    };
    let tab = |knots: Vec<f64>, values: &[f64]| {
        Policy::Regular(RegularPolicy {
            basis: Basis::PiecewiseLinear { knots },
            recent: 1,
            switch_times: vec![],
            coefficients: vec![Mat::from_rows(&[values.to_vec()])],
        })
    };
    let profile =
        PolicyProfile { per_dm: vec![tab(spec.x_grid(), &policies.gamma1), tab(spec.y_grid(), &policies.gamma2)] };
    Ok((problem, profile))
}

/// Reads stage policies back from a profile built by [`team_problem`].
pub fn stage_policies(spec: &WitsenhausenSpec, profile: &PolicyProfile) -> Result<StagePolicies> {
    let values = |i: usize| -> Result<Vec<f64>> {
        match profile.per_dm.get(i) {
            Some(Policy::Regular(r)) if matches!(r.basis, Basis::PiecewiseLinear { .. }) && r.coefficients.len() == 1 => {
                Ok(r.coefficients[0].as_slice().to_vec())
            }
            _ => Err(TeamsError::InvalidArgument("expected tabulated Witsenhausen policies".into())),
        }
    };
    let p = StagePolicies { gamma1: values(0)?, gamma2: values(1)? };
    p.check(spec)?;
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> WitsenhausenSpec {
        WitsenhausenSpec { nodes: 200, ..WitsenhausenSpec::new(0.5, 1.0, 1.0).unwrap() }
    }

    /// `J(a, b) = k²a²σ₀² + (1 − b)²(1 + a)²σ₀² + b²σ_v²`.
    fn affine_closed_form(s: &WitsenhausenSpec, a: f64, b: f64) -> f64 {
        let v0 = s.sigma0 * s.sigma0;
        s.k * s.k * a * a * v0 + (1.0 - b).powi(2) * (1.0 + a).powi(2) * v0 + b * b * s.sigmav * s.sigmav
    }

    #[test]
    fn zero_policy_costs_prior_variance() {
        let s = WitsenhausenSpec { sigma0: 1.7, ..spec() };
        let j = wits_payoff(&s, &StagePolicies::zero(&s)).unwrap();
        assert!((j - 1.7 * 1.7).abs() < 1e-6);
    }

    #[test]
    fn affine_payoff_matches_closed_form() {
        let s = spec();
        for (a, b) in [(0.0, 0.5), (-0.3, 0.2), (0.4, 0.9)] {
            let j = wits_payoff(&s, &StagePolicies::affine(&s, a, b)).unwrap();
            assert!((j - affine_closed_form(&s, a, b)).abs() < 1e-5, "{a} {b}: {j}");
        }
    }

    #[test]
    fn mmse_estimator_without_first_stage() {
        let s = spec();
        let b = affine_gain(&s, 0.0);
        assert!((b - 0.5).abs() < 1e-12);
        let j = wits_payoff(&s, &StagePolicies::affine(&s, 0.0, b)).unwrap();
        assert!((j - 0.5).abs() < 1e-6);
    }

    #[test]
    fn affine_baseline_minimizes_closed_form() {
        let s = spec();
        let ((a, b), j) = wits_affine_baseline(&s).unwrap();
        let best = (0..=30000)
            .map(|i| -2.0 + 3.0 * i as f64 / 30000.0)
            .map(|a| affine_closed_form(&s, a, affine_gain(&s, a)))
            .fold(f64::INFINITY, f64::min);
        assert!((j - best).abs() < 1e-5);
        assert!((b - affine_gain(&s, a)).abs() < 1e-12);
    }

    #[test]
    fn expensive_control_keeps_first_stage_idle() {
        let s = WitsenhausenSpec { k: 10.0, ..spec() };
        let ((a, _), _) = wits_affine_baseline(&s).unwrap();
        assert!(a.abs() < 1e-2);
        let fp = wits_fixed_point(&s, &StagePolicies::zero(&s), 50, 1e-8).unwrap();
        assert!(fp.converged);
        assert!(fp.policies.gamma1.iter().all(|u| u.abs() < 0.05));
    }

    #[test]
    fn loud_channel_favours_cancelling_the_state() {
        let s = WitsenhausenSpec { sigmav: 50.0, ..spec() };
        let ((a, b), j) = wits_affine_baseline(&s).unwrap();
        // b ≈ 0, so J(a) ≈ k²a² + (1 + a)², minimized at a = −1/(1 + k²).
        assert!(b < 1e-2);
        assert!((a + 0.8).abs() < 1e-2, "{a}");
        assert!((j - 0.2).abs() < 1e-3, "{j}");
    }

    #[test]
    fn fixed_point_preserves_odd_symmetry_and_never_worsens() {
        let s = spec();
        let init = StagePolicies::affine(&s, -0.4, 0.3);
        let j0 = wits_payoff(&s, &init).unwrap();
        let fp = wits_fixed_point(&s, &init, 200, 1e-9).unwrap();
        let n = s.nodes;
        for i in 0..n {
            assert!((fp.policies.gamma1[i] + fp.policies.gamma1[n - 1 - i]).abs() < 1e-7);
            assert!((fp.policies.gamma2[i] + fp.policies.gamma2[n - 1 - i]).abs() < 1e-7);
        }
        for w in fp.trace.windows(2) {
            assert!(w[1].payoff <= w[0].payoff + 1e-10);
        }
        assert!(fp.trace[0].payoff <= j0 + 1e-10);
    }

    #[test]
    fn mmse_gain_is_second_stage_stationary_only() {
        // γ₂ = y/2 is E[x₁ | y₁] when γ₁ ≡ 0, but γ₁ ≡ 0 is not a best response to it.
        let s = spec();
        let (r1, r2) = wits_residuals(&s, &StagePolicies::affine(&s, 0.0, 0.5)).unwrap();
        assert!(r2 < 1e-5, "{r2}");
        assert!(r1 > 1e-3, "{r1}");
    }

    #[test]
    fn single_action_atom_brute_force_is_that_atom() {
        let s = spec();
        let grid = CoarseGrid { action_atoms: 1, restarts: 0, ..CoarseGrid::default() };
        let bf = wits_bruteforce(&s, &grid).unwrap();
        let cp = CoarseProblem::new(&s, &grid).unwrap();
        assert!(bf.u1.iter().all(|u| *u == 0.0));
        assert!((bf.payoff - cp.value(&vec![0.0; cp.x.len()])).abs() < 1e-15);
        assert!(!bf.budget_exceeded);
    }

    #[test]
    fn brute_force_is_deterministic_and_beats_its_starts() {
        let s = spec();
        let grid = CoarseGrid { restarts: 4, ..CoarseGrid::default() };
        let a = wits_bruteforce(&s, &grid).unwrap();
        let b = wits_bruteforce(&s, &grid).unwrap();
        assert_eq!(a, b);
        let cp = CoarseProblem::new(&s, &grid).unwrap();
        assert!(a.payoff <= cp.value(&vec![0.0; cp.x.len()]) + 1e-15);
        let probs: f64 = cp.px.iter().sum();
        assert!((probs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tiny_budget_is_reported() {
        let s = spec();
        let bf = wits_bruteforce(&s, &CoarseGrid { budget: 50, ..CoarseGrid::default() });
        match bf {
            Ok(b) => assert!(b.budget_exceeded),
            Err(e) => assert!(matches!(e, TeamsError::BudgetExceeded { .. })),
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(WitsenhausenSpec::new(0.0, 1.0, 1.0).is_err());
        assert!(WitsenhausenSpec::new(1.0, -1.0, 1.0).is_err());
        assert!(WitsenhausenSpec { range: 2.0, ..spec() }.check().is_err());
        let s = spec();
        let short = StagePolicies { gamma1: vec![0.0; 3], gamma2: vec![0.0; s.nodes] };
        assert!(matches!(wits_payoff(&s, &short), Err(TeamsError::ShapeMismatch(_))));
    }

    #[test]
    fn team_form_round_trips_and_matches_quadrature() {
        use crate::girsanov::payoff_original;
        use crate::simulate::{problem_grid, simulate_range, Measure};
        let s = spec();
        let p = StagePolicies::affine(&s, -0.5, 0.4);
        let (problem, profile) = team_problem(&s, &p).unwrap();
        problem.check_shapes().unwrap();
        assert_eq!(stage_policies(&s, &profile).unwrap(), p);
        let grid = problem_grid(&problem, 1.0).unwrap();
        let ens = simulate_range(&problem, &profile, grid, 40_000, 1, Measure::Original, 0).unwrap();
        let mc = payoff_original(&problem, &ens).unwrap();
        let exact = wits_payoff(&s, &p).unwrap();
        assert!((mc.value - exact).abs() < 4.0 * mc.stderr, "{mc:?} vs {exact}");
    }
}
