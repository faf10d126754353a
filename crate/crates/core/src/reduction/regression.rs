//! Least-squares conditional expectations `E[target | features]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TeamsError};
use crate::linalg::solve_spd;
use crate::numerics::chunked_sum_vec;
use crate::policy::Basis;

/// Ridge weights below this are raised to it (relative to the normalized Gram matrix).
pub const RIDGE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegressionBasis {
    /// Cell means on equal-width bins of every standardized coordinate.
    PiecewiseConstant { bins: usize },
    /// Monomials of total degree ≤ `degree` in standardized coordinates.
    Polynomial { degree: usize },
    /// Constant plus Gaussian bumps centered at `centers` evenly spaced data rows.
    RadialBasis { centers: usize, width: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionSpec {
    pub basis: RegressionBasis,
    #[serde(default)]
    pub ridge: f64,
}

impl RegressionSpec {
    pub fn polynomial(degree: usize) -> Self {
        RegressionSpec { basis: RegressionBasis::Polynomial { degree }, ridge: 0.0 }
    }

    pub fn piecewise_constant(bins: usize) -> Self {
        RegressionSpec { basis: RegressionBasis::PiecewiseConstant { bins }, ridge: 0.0 }
    }

    pub fn check(&self) -> Result<()> {
        let ok = match self.basis {
            RegressionBasis::PiecewiseConstant { bins } => bins >= 1,
            RegressionBasis::Polynomial { .. } => true,
            RegressionBasis::RadialBasis { centers, width } => centers >= 1 && width > 0.0,
        };
        if !ok || !(self.ridge >= 0.0) {
            return Err(TeamsError::InvalidArgument(format!("invalid regression spec {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Design {
    Cells { bins: usize, lo: Vec<f64>, width: Vec<f64>, means: DMatrix<f64> },
    Linear { basis: Basis, coef: DMatrix<f64> },
}

/// A fitted predictor for `q` targets at once.
#[derive(Debug, Clone)]
pub struct Predictor {
    p: usize,
    /// Standardization of the raw features; collapsed coordinates are skipped.
    center: Vec<f64>,
    scale: Vec<f64>,
    keep: Vec<usize>,
    design: Design,
    pub targets: usize,
    /// Number of basis functions.
    pub basis_size: usize,
    pub n: usize,
    /// Mean squared in-sample residual per target.
    pub residual_var: Vec<f64>,
    /// Raw coordinates that were constant and dropped.
    pub collapsed: Vec<usize>,
}

impl Predictor {
    fn standardize(&self, z: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.keep.iter().map(|&c| (z[c] - self.center[c]) / self.scale[c]));
    }

    pub fn predict(&self, z: &[f64], out: &mut [f64]) {
        debug_assert_eq!(z.len(), self.p);
        let mut s = Vec::with_capacity(self.keep.len());
        self.standardize(z, &mut s);
        match &self.design {
            Design::Cells { bins, lo, width, means } => {
                let cell = cell_of(&s, *bins, lo, width);
                for (q, o) in out.iter_mut().enumerate() {
                    *o = means[(cell, q)];
                }
            }
            Design::Linear { basis, coef } => {
                let mut phi = Vec::new();
                basis.eval(&s, &mut phi);
                for (q, o) in out.iter_mut().enumerate() {
                    *o = (0..phi.len()).map(|k| phi[k] * coef[(k, q)]).sum();
                }
            }
        }
    }

    pub fn predict1(&self, z: &[f64]) -> f64 {
        let mut o = [0.0];
        self.predict(z, &mut o);
        o[0]
    }

    /// `sqrt(σ̂² K / n)` per target: the scale of pure estimation noise in a
    /// fitted conditional mean.
    pub fn noise_floor(&self) -> Vec<f64> {
        self.residual_var.iter().map(|v| (v * self.basis_size as f64 / self.n as f64).sqrt()).collect()
    }
}

fn cell_of(s: &[f64], bins: usize, lo: &[f64], width: &[f64]) -> usize {
    s.iter().enumerate().fold(0, |acc, (c, v)| {
        let b = if width[c] > 0.0 { (((v - lo[c]) / width[c]).floor().max(0.0) as usize).min(bins - 1) } else { 0 };
        acc * bins + b
    })
}

/// Fits `targets` (`n × q`, row-major) on `features` (`n × p`, row-major).
pub fn fit(features: &[f64], p: usize, targets: &[f64], q: usize, spec: &RegressionSpec) -> Result<Predictor> {
    spec.check()?;
    if p == 0 || q == 0 {
        return Err(TeamsError::InvalidArgument("feature and target dimensions must be positive".into()));
    }
    let n = targets.len() / q;
    if n == 0 || targets.len() != n * q || features.len() != n * p {
        return Err(TeamsError::ShapeMismatch(format!(
            "{} feature values and {} targets for p={p}, q={q}",
            features.len(),
            targets.len()
        )));
    }
    if features.iter().chain(targets).any(|v| !v.is_finite()) {
        return Err(TeamsError::InvalidArgument("regression inputs must be finite".into()));
    }
    // Moments for standardization.
    let sums = chunked_sum_vec(n, 2 * p, |i, acc| {
        for c in 0..p {
            let v = features[i * p + c];
            acc[c] += v;
            acc[p + c] += v * v;
        }
    });
    let mut center = vec![0.0; p];
    let mut scale = vec![1.0; p];
    let mut keep = Vec::new();
    let mut collapsed = Vec::new();
    for c in 0..p {
        let m = sums[c] / n as f64;
        let var = (sums[p + c] / n as f64 - m * m).max(0.0);
        center[c] = m;
        if var.sqrt() <= 1e-12 * (1.0 + m.abs()) {
            collapsed.push(c);
        } else {
            scale[c] = var.sqrt();
            keep.push(c);
        }
    }
    if !collapsed.is_empty() {
        log::debug!("regression: constant feature coordinates {collapsed:?} collapsed");
    }
    let pk = keep.len();
    let std_row = |i: usize, out: &mut Vec<f64>| {
        out.clear();
        out.extend(keep.iter().map(|&c| (features[i * p + c] - center[c]) / scale[c]));
    };

    let mut pred = Predictor {
        p,
        center: center.clone(),
        scale: scale.clone(),
        keep: keep.clone(),
        design: Design::Cells { bins: 1, lo: vec![], width: vec![], means: DMatrix::zeros(1, q) },
        targets: q,
        basis_size: 0,
        n,
        residual_var: vec![0.0; q],
        collapsed,
    };

    match spec.basis {
        RegressionBasis::PiecewiseConstant { bins } => {
            let mut lo = vec![f64::INFINITY; pk];
            let mut hi = vec![f64::NEG_INFINITY; pk];
            let mut s = Vec::new();
            for i in 0..n {
                std_row(i, &mut s);
                for c in 0..pk {
                    lo[c] = lo[c].min(s[c]);
                    hi[c] = hi[c].max(s[c]);
                }
            }
            let width: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| (h - l) / bins as f64).collect();
            let cells = bins.checked_pow(pk as u32).filter(|c| *c <= 1 << 22).ok_or_else(|| {
                TeamsError::InvalidArgument(format!("{bins} bins over {pk} features is too many cells"))
            })?;
            let mut sum = DMatrix::<f64>::zeros(cells, q);
            let mut count = vec![0usize; cells];
            let mut global = vec![0.0; q];
            for i in 0..n {
                std_row(i, &mut s);
                let cell = cell_of(&s, bins, &lo, &width);
                count[cell] += 1;
                for t in 0..q {
                    sum[(cell, t)] += targets[i * q + t];
                    global[t] += targets[i * q + t];
                }
            }
            for (cell, &cnt) in count.iter().enumerate() {
                for t in 0..q {
                    sum[(cell, t)] = if cnt > 0 { sum[(cell, t)] / cnt as f64 } else { global[t] / n as f64 };
                }
            }
            pred.basis_size = count.iter().filter(|c| **c > 0).count().max(1);
            pred.design = Design::Cells { bins, lo, width, means: sum };
        }
        RegressionBasis::Polynomial { .. } | RegressionBasis::RadialBasis { .. } => {
            let basis = match spec.basis {
                RegressionBasis::Polynomial { degree } => Basis::Polynomial { degree: if pk == 0 { 0 } else { degree } },
                RegressionBasis::RadialBasis { centers, width } => {
                    let mut cs = Vec::with_capacity(centers);
                    let mut s = Vec::new();
                    for r in 0..centers.min(n) {
                        std_row(r * n / centers.min(n), &mut s);
                        cs.push(s.clone());
                    }
                    Basis::Radial { centers: if pk == 0 { vec![] } else { cs }, width }
                }
                RegressionBasis::PiecewiseConstant { .. } => unreachable!(),
            };
            let k = basis.size(pk);
            let width = k * k + k * q;
            let moments = chunked_sum_vec(n, width, |i, acc| {
                let mut s = Vec::with_capacity(pk);
                std_row(i, &mut s);
                let mut phi = Vec::with_capacity(k);
                basis.eval(&s, &mut phi);
                for a in 0..k {
                    for b in a..k {
                        acc[a * k + b] += phi[a] * phi[b];
                    }
                    for t in 0..q {
                        acc[k * k + a * q + t] += phi[a] * targets[i * q + t];
                    }
                }
            });
            let mut gram = DMatrix::<f64>::zeros(k, k);
            for a in 0..k {
                for b in a..k {
                    let v = moments[a * k + b] / n as f64;
                    gram[(a, b)] = v;
                    gram[(b, a)] = v;
                }
            }
            let rhs = DMatrix::from_fn(k, q, |a, t| moments[k * k + a * q + t] / n as f64);
            let coef = solve_spd(&gram, &rhs, spec.ridge.max(RIDGE_FLOOR));
            pred.basis_size = k;
            pred.design = Design::Linear { basis, coef };
        }
    }

    let sq = chunked_sum_vec(n, q, |i, acc| {
        let mut out = vec![0.0; q];
        pred.predict(&features[i * p..(i + 1) * p], &mut out);
        for t in 0..q {
            let r = targets[i * q + t] - out[t];
            acc[t] += r * r;
        }
    });
    pred.residual_var = sq.iter().map(|s| s / n as f64).collect();
    Ok(pred)
}

/// Single-target convenience wrapper.
pub fn conditional_expectation(targets: &[f64], features: &[f64], p: usize, spec: &RegressionSpec) -> Result<Predictor> {
    fit(features, p, targets, 1, spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_target_is_recovered() {
        let z: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin() * 3.0).collect();
        let pred = conditional_expectation(&z, &z, 1, &RegressionSpec::polynomial(1)).unwrap();
        for v in [-2.0, 0.3, 1.7] {
            assert!((pred.predict1(&[v]) - v).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_feature_is_collapsed() {
        let z: Vec<f64> = (0..50).flat_map(|i| [i as f64, 4.0]).collect();
        let t: Vec<f64> = (0..50).map(|i| 2.0 * i as f64).collect();
        let pred = fit(&z, 2, &t, 1, &RegressionSpec::piecewise_constant(5)).unwrap();
        assert_eq!(pred.collapsed, vec![1]);
        let pred = fit(&z, 2, &t, 1, &RegressionSpec::polynomial(1)).unwrap();
        assert!((pred.predict1(&[10.0, 4.0]) - 20.0).abs() < 1e-7);
    }

    #[test]
    fn cell_means() {
        let z = vec![0.0, 0.1, 0.9, 1.0];
        let t = vec![1.0, 3.0, 10.0, 20.0];
        let pred = conditional_expectation(&t, &z, 1, &RegressionSpec::piecewise_constant(2)).unwrap();
        assert_eq!(pred.predict1(&[0.05]), 2.0);
        assert_eq!(pred.predict1(&[0.95]), 15.0);
    }

    #[test]
    fn shape_errors() {
        assert!(fit(&[1.0, 2.0, 3.0], 2, &[1.0, 2.0], 1, &RegressionSpec::polynomial(1)).is_err());
        let bad = RegressionSpec { basis: RegressionBasis::PiecewiseConstant { bins: 0 }, ridge: 0.0 };
        assert!(bad.check().is_err());
    }
}
