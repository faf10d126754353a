//! Strategy representations: regular (basis expansion) and relaxed (per-cell
//! distributions over an action grid).

use serde::{Deserialize, Serialize};

use crate::error::{Result, TeamsError};
use crate::linalg::Mat;
use crate::problem::{policy_feature_dim, ActionSet, ActionSpec, TeamProblem};

/// Feature map applied to raw information features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Basis {
    /// All monomials of total degree ≤ `degree`, constant first.
    Polynomial { degree: usize },
    /// One-hot indicator of the cell containing the features; `edges` split
    /// every coordinate.
    Indicator { edges: Vec<f64> },
    /// Hat functions on sorted knots over the first feature (tabulated maps with
    /// linear interpolation and flat extrapolation).
    PiecewiseLinear { knots: Vec<f64> },
    /// Constant plus Gaussian bumps.
    Radial { centers: Vec<Vec<f64>>, width: f64 },
}

/// Monomial exponents of total degree ≤ `degree` in `p` variables, in the order
/// produced by [`Basis::eval`].
pub fn monomial_exponents(p: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0u32; p]];
    let mut prev: Vec<(Vec<u32>, usize)> = vec![(vec![0u32; p], 0)];
    for _ in 0..degree {
        let mut next = Vec::new();
        for (e, last) in &prev {
            for k in *last..p {
                let mut ne = e.clone();
                ne[k] += 1;
                next.push((ne, k));
            }
        }
        out.extend(next.iter().map(|(e, _)| e.clone()));
        prev = next;
    }
    out
}

fn cell_index(edges: &[f64], z: &[f64]) -> usize {
    let radix = edges.len() + 1;
    z.iter().fold(0, |acc, v| acc * radix + edges.iter().take_while(|e| **e <= *v).count())
}

impl Basis {
    pub fn size(&self, p: usize) -> usize {
        match self {
            Basis::Polynomial { degree } => {
                // C(p + degree, degree)
                let mut c = 1usize;
                for i in 1..=*degree {
                    c = c * (p + i) / i;
                }
                c
            }
            Basis::Indicator { edges } => (edges.len() + 1).pow(p as u32),
            Basis::PiecewiseLinear { knots } => knots.len(),
            Basis::Radial { centers, .. } => centers.len() + 1,
        }
    }

    pub fn eval(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        match self {
            Basis::Polynomial { degree } => {
                out.push(1.0);
                let mut prev: Vec<(f64, usize)> = vec![(1.0, 0)];
                for _ in 0..*degree {
                    let mut next = Vec::with_capacity(prev.len() * z.len());
                    for &(v, last) in &prev {
                        for (k, zk) in z.iter().enumerate().skip(last) {
                            next.push((v * zk, k));
                        }
                    }
                    out.extend(next.iter().map(|(v, _)| *v));
                    prev = next;
                }
            }
            Basis::Indicator { edges } => {
                out.resize(self.size(z.len()), 0.0);
                out[cell_index(edges, z)] = 1.0;
            }
            Basis::PiecewiseLinear { knots } => {
                out.resize(knots.len(), 0.0);
                let (i, w) = hat_weights(knots, z[0]);
                out[i] += 1.0 - w;
                if w > 0.0 {
                    out[i + 1] += w;
                }
            }
            Basis::Radial { centers, width } => {
                out.push(1.0);
                for c in centers {
                    let d2: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                    out.push((-0.5 * d2 / (width * width)).exp());
                }
            }
        }
    }

    /// Derivative of every basis function with respect to every feature, `K × p`.
    pub fn jacobian(&self, z: &[f64], out: &mut Mat) {
        out.fill(0.0);
        match self {
            Basis::Polynomial { degree } => {
                for (row, e) in monomial_exponents(z.len(), *degree).iter().enumerate() {
                    for k in 0..z.len() {
                        if e[k] == 0 {
                            continue;
                        }
                        let mut v = e[k] as f64;
                        for (c, (&ec, &zc)) in e.iter().zip(z).enumerate() {
                            let pow = if c == k { ec - 1 } else { ec };
                            v *= zc.powi(pow as i32);
                        }
                        out[(row, k)] = v;
                    }
                }
            }
            Basis::Indicator { .. } => {}
            Basis::PiecewiseLinear { knots } => {
                let x = z[0];
                if knots.len() >= 2 && x > knots[0] && x < knots[knots.len() - 1] {
                    let (i, _) = hat_weights(knots, x);
                    let slope = 1.0 / (knots[i + 1] - knots[i]);
                    out[(i, 0)] = -slope;
                    out[(i + 1, 0)] = slope;
                }
            }
            Basis::Radial { centers, width } => {
                for (r, c) in centers.iter().enumerate() {
                    let d2: f64 = c.iter().zip(z).map(|(a, b)| (a - b) * (a - b)).sum();
                    let g = (-0.5 * d2 / (width * width)).exp();
                    for k in 0..z.len() {
                        out[(r + 1, k)] = -g * (z[k] - c[k]) / (width * width);
                    }
                }
            }
        }
    }

    fn check(&self, p: usize) -> Result<()> {
        let bad = |m: &str| Err(TeamsError::InvalidArgument(format!("basis: {m}")));
        match self {
            Basis::Indicator { edges } if edges.windows(2).any(|w| w[0] >= w[1]) => bad("edges must increase"),
            Basis::Indicator { edges } if (edges.len() + 1).checked_pow(p as u32).is_none_or(|c| c > 1 << 20) => {
                bad("too many indicator cells")
            }
            Basis::PiecewiseLinear { knots } => {
                if knots.is_empty() || knots.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("knots must be nonempty and increasing");
                }
                if p != 1 {
                    return bad("piecewise-linear basis needs exactly one feature");
                }
                Ok(())
            }
            Basis::Radial { centers, width } => {
                if !(*width > 0.0) || centers.iter().any(|c| c.len() != p) {
                    return bad("radial centers must match the feature dimension and width be positive");
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Segment index and interpolation weight of `x` on sorted knots (flat outside).
fn hat_weights(knots: &[f64], x: f64) -> (usize, f64) {
    let n = knots.len();
    if n == 1 || x <= knots[0] {
        return (0, 0.0);
    }
    if x >= knots[n - 1] {
        return (n - 1, 0.0);
    }
    let i = knots.partition_point(|k| *k <= x) - 1;
    (i, (x - knots[i]) / (knots[i + 1] - knots[i]))
}

fn segment_of(switch_times: &[f64], t: f64) -> usize {
    switch_times.iter().take_while(|&&s| s <= t + 1e-9).count()
}

fn one() -> usize {
    1
}

/// Deterministic map `u = Π_A(C_s · basis(z))` with piecewise-constant-in-time
/// coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularPolicy {
    pub basis: Basis,
    /// Number of most recent samples per information source used as features.
    #[serde(default = "one")]
    pub recent: usize,
    #[serde(default)]
    pub switch_times: Vec<f64>,
    /// One `d × K` matrix per time segment.
    pub coefficients: Vec<Mat>,
}

impl RegularPolicy {
    pub fn zeros(basis: Basis, recent: usize, switch_times: Vec<f64>, action_dim: usize, feature_dim: usize) -> Self {
        let k = basis.size(feature_dim);
        let coefficients = vec![Mat::zeros(action_dim, k); switch_times.len() + 1];
        RegularPolicy { basis, recent, switch_times, coefficients }
    }

    /// Constant action, independent of features.
    pub fn constant(action: &[f64]) -> Self {
        let mut c = Mat::zeros(action.len(), 1);
        for (i, a) in action.iter().enumerate() {
            c[(i, 0)] = *a;
        }
        RegularPolicy { basis: Basis::Polynomial { degree: 0 }, recent: 1, switch_times: vec![], coefficients: vec![c] }
    }

    pub fn segment(&self, t: f64) -> usize {
        segment_of(&self.switch_times, t)
    }

    pub fn n_params(&self) -> usize {
        self.coefficients.iter().map(|c| c.as_slice().len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        self.coefficients.iter().flat_map(|c| c.as_slice().iter().copied()).collect()
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        let mut off = 0;
        for c in &mut self.coefficients {
            let len = c.as_slice().len();
            c.as_mut_slice().copy_from_slice(&theta[off..off + len]);
            off += len;
        }
    }

    /// Offset of segment `s` inside the flat parameter vector.
    pub fn segment_offset(&self, s: usize) -> usize {
        self.coefficients[..s].iter().map(|c| c.as_slice().len()).sum()
    }

    /// Unprojected action `C_s · basis(z)` and the basis values.
    pub fn raw_action(&self, t: f64, z: &[f64], phi: &mut Vec<f64>, out: &mut [f64]) -> usize {
        let s = self.segment(t);
        self.basis.eval(z, phi);
        out.iter_mut().for_each(|o| *o = 0.0);
        self.coefficients[s].mul_vec_add(phi, out);
        s
    }

    pub fn act(&self, t: f64, z: &[f64], spec: &ActionSpec, out: &mut [f64]) {
        let mut phi = Vec::new();
        let mut pinned = vec![false; out.len()];
        self.raw_action(t, z, &mut phi, out);
        spec.project(out, &mut pinned);
    }

    /// Action together with its sensitivities. On free coordinates `c`,
    /// `∂u_c/∂C_s[c,k] = phi[k]` and `∂u/∂z = C_s · ∂basis/∂z` (`dz`, `d × p`);
    /// pinned coordinates have zero sensitivity. Returns the segment.
    pub fn act_with_sensitivity(
        &self,
        t: f64,
        z: &[f64],
        spec: &ActionSpec,
        out: &mut [f64],
        pinned: &mut [bool],
        phi: &mut Vec<f64>,
        dz: &mut Mat,
    ) -> usize {
        let s = self.raw_action(t, z, phi, out);
        spec.project(out, pinned);
        let c = &self.coefficients[s];
        let mut jb = Mat::zeros(phi.len(), z.len());
        self.basis.jacobian(z, &mut jb);
        *dz = c.matmul(&jb);
        for (r, &pin) in pinned.iter().enumerate() {
            if pin {
                for col in 0..z.len() {
                    dz[(r, col)] = 0.0;
                }
            }
        }
        s
    }
}

/// Per time segment and per feature cell, a probability vector over atoms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RelaxedPolicy {
    #[serde(default = "one")]
    pub recent: usize,
    /// Cell edges applied to every feature coordinate.
    pub edges: Vec<f64>,
    #[serde(default)]
    pub switch_times: Vec<f64>,
    pub atoms: Vec<Vec<f64>>,
    /// `probs[segment][cell][atom]`.
    pub probs: Vec<Vec<Vec<f64>>>,
}

impl RelaxedPolicy {
    pub fn uniform(edges: Vec<f64>, switch_times: Vec<f64>, atoms: Vec<Vec<f64>>, feature_dim: usize) -> Self {
        let cells = (edges.len() + 1).pow(feature_dim as u32);
        let a = atoms.len();
        let probs = vec![vec![vec![1.0 / a as f64; a]; cells]; switch_times.len() + 1];
        RelaxedPolicy { recent: 1, edges, switch_times, atoms, probs }
    }

    pub fn segment(&self, t: f64) -> usize {
        segment_of(&self.switch_times, t)
    }

    pub fn cell(&self, z: &[f64]) -> usize {
        cell_index(&self.edges, z)
    }

    /// Samples an atom index by inversion with one uniform draw.
    pub fn pick(&self, t: f64, z: &[f64], uniform: f64) -> usize {
        let p = &self.probs[self.segment(t)][self.cell(z)];
        let mut acc = 0.0;
        for (i, pi) in p.iter().enumerate() {
            acc += pi;
            if uniform < acc {
                return i;
            }
        }
        // Round-off: the last atom with positive mass.
        p.iter().rposition(|v| *v > 0.0).unwrap_or(0)
    }

    pub fn set_point_mass(&mut self, segment: usize, cell: usize, atom: usize) {
        let row = &mut self.probs[segment][cell];
        row.iter_mut().for_each(|p| *p = 0.0);
        row[atom] = 1.0;
    }

    fn check(&self, feature_dim: usize) -> Result<()> {
        let cells = (self.edges.len() + 1).pow(feature_dim as u32);
        if self.probs.len() != self.switch_times.len() + 1 {
            return Err(TeamsError::InvalidArgument("relaxed policy: one table per time segment".into()));
        }
        for table in &self.probs {
            if table.len() != cells {
                return Err(TeamsError::InvalidArgument(format!(
                    "relaxed policy: {} cells, expected {cells}",
                    table.len()
                )));
            }
            for row in table {
                let sum: f64 = row.iter().sum();
                if row.len() != self.atoms.len() || row.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-12 {
                    return Err(TeamsError::InvalidArgument(
                        "relaxed policy: probability vectors must be nonnegative and sum to 1".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Regular(RegularPolicy),
    Relaxed(RelaxedPolicy),
}

impl Policy {
    pub fn recent(&self) -> usize {
        match self {
            Policy::Regular(p) => p.recent,
            Policy::Relaxed(p) => p.recent,
        }
    }

    /// Action at time `t` given features `z`; `uniform` drives relaxed sampling.
    pub fn act(&self, t: f64, z: &[f64], uniform: f64, spec: &ActionSpec, out: &mut [f64]) {
        match self {
            Policy::Regular(p) => p.act(t, z, spec, out),
            Policy::Relaxed(p) => out.copy_from_slice(&p.atoms[p.pick(t, z, uniform)]),
        }
    }

    pub fn as_regular(&self) -> Option<&RegularPolicy> {
        match self {
            Policy::Regular(p) => Some(p),
            Policy::Relaxed(_) => None,
        }
    }

    pub fn as_relaxed(&self) -> Option<&RelaxedPolicy> {
        match self {
            Policy::Relaxed(p) => Some(p),
            Policy::Regular(_) => None,
        }
    }
}

/// One policy per decision maker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyProfile {
    pub per_dm: Vec<Policy>,
}

impl PolicyProfile {
    /// Zero regular policies with a shared basis.
    pub fn zeros(problem: &TeamProblem, basis: Basis, recent: usize, switch_times: Vec<f64>) -> Self {
        let obs_dims = problem.obs_dims();
        let per_dm = problem
            .dms
            .iter()
            .enumerate()
            .map(|(i, dm)| {
                let p = policy_feature_dim(&dm.information, i, &obs_dims, problem.state_dim, recent);
                Policy::Regular(RegularPolicy::zeros(basis.clone(), recent, switch_times.clone(), dm.action.dim, p))
            })
            .collect();
        PolicyProfile { per_dm }
    }

    pub fn feature_dims(&self, problem: &TeamProblem) -> Vec<usize> {
        let obs_dims = problem.obs_dims();
        problem
            .dms
            .iter()
            .enumerate()
            .map(|(i, dm)| policy_feature_dim(&dm.information, i, &obs_dims, problem.state_dim, self.per_dm[i].recent()))
            .collect()
    }

    /// Checks the profile against the problem's DMs, action sets and features.
    pub fn check(&self, problem: &TeamProblem) -> Result<()> {
        if self.per_dm.len() != problem.dm_count() {
            return Err(TeamsError::InvalidArgument(format!(
                "profile has {} policies for {} decision makers",
                self.per_dm.len(),
                problem.dm_count()
            )));
        }
        let dims = self.feature_dims(problem);
        for (i, (pol, dm)) in self.per_dm.iter().zip(&problem.dms).enumerate() {
            match pol {
                Policy::Regular(r) => {
                    r.basis.check(dims[i])?;
                    let k = r.basis.size(dims[i]);
                    if r.coefficients.len() != r.switch_times.len() + 1
                        || r.coefficients.iter().any(|c| c.rows() != dm.action.dim || c.cols() != k)
                    {
                        return Err(TeamsError::InvalidArgument(format!(
                            "policy of DM {i}: coefficients must be {}×{k} per segment",
                            dm.action.dim
                        )));
                    }
                }
                Policy::Relaxed(r) => {
                    r.check(dims[i])?;
                    let feasible = match &dm.action.set {
                        ActionSet::Grid { atoms } => r.atoms.iter().all(|a| atoms.contains(a)),
                        ActionSet::Box { lower, upper } => r.atoms.iter().all(|a| {
                            a.len() == lower.len() && a.iter().zip(lower.iter().zip(upper)).all(|(v, (l, u))| v >= l && v <= u)
                        }),
                    };
                    if !feasible {
                        return Err(TeamsError::InvalidArgument(format!("relaxed atoms of DM {i} lie outside A^{i}")));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_basis_order_and_size() {
        let b = Basis::Polynomial { degree: 2 };
        let mut out = Vec::new();
        b.eval(&[2.0, 3.0], &mut out);
        assert_eq!(out, vec![1.0, 2.0, 3.0, 4.0, 6.0, 9.0]);
        assert_eq!(b.size(2), 6);
        assert_eq!(monomial_exponents(2, 2).len(), 6);
    }

    #[test]
    fn polynomial_jacobian_matches_differences() {
        let b = Basis::Polynomial { degree: 3 };
        let z = [0.4, -1.3];
        let mut jac = Mat::zeros(b.size(2), 2);
        b.jacobian(&z, &mut jac);
        let (mut up, mut dn) = (Vec::new(), Vec::new());
        for k in 0..2 {
            let mut zp = z;
            zp[k] += 1e-6;
            let mut zm = z;
            zm[k] -= 1e-6;
            b.eval(&zp, &mut up);
            b.eval(&zm, &mut dn);
            for r in 0..up.len() {
                assert!(((up[r] - dn[r]) / 2e-6 - jac[(r, k)]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hat_basis_interpolates() {
        let b = Basis::PiecewiseLinear { knots: vec![-1.0, 0.0, 2.0] };
        let mut out = Vec::new();
        b.eval(&[1.0], &mut out);
        assert_eq!(out, vec![0.0, 0.5, 0.5]);
        b.eval(&[5.0], &mut out);
        assert_eq!(out, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn regular_output_is_clipped() {
        let mut p = RegularPolicy::zeros(Basis::Polynomial { degree: 1 }, 1, vec![], 1, 1);
        p.set_params(&[0.0, 10.0]);
        let mut u = [0.0];
        p.act(0.0, &[1.0], &ActionSpec::interval(-1.0, 1.0), &mut u);
        assert_eq!(u[0], 1.0);
    }

    #[test]
    fn relaxed_sampling_by_inversion() {
        let mut p = RelaxedPolicy::uniform(vec![0.0], vec![], vec![vec![-1.0], vec![1.0]], 1);
        assert_eq!(p.pick(0.0, &[0.5], 0.25), 0);
        assert_eq!(p.pick(0.0, &[0.5], 0.75), 1);
        p.set_point_mass(0, 1, 1);
        assert_eq!(p.pick(0.0, &[0.5], 0.0), 1);
        assert_eq!(p.cell(&[-3.0]), 0);
    }

    #[test]
    fn policy_json_round_trip() {
        let p = PolicyProfile {
            per_dm: vec![
                Policy::Regular(RegularPolicy::constant(&[0.5])),
                Policy::Relaxed(RelaxedPolicy::uniform(vec![], vec![], vec![vec![0.0], vec![1.0]], 1)),
            ],
        };
        let s = serde_json::to_string(&p).unwrap();
        let back: PolicyProfile = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
