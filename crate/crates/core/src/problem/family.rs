//! Coefficient functions: named families selectable from JSON, plus programmatic
//! closures. Actions are passed as the joint vector `(u¹, …, uᴺ)`.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::linalg::Mat;

const FD_STEP: f64 = 1e-6;

/// Structural facts used for convexity certification and information checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Structure {
    pub affine: bool,
    pub uses_state: bool,
    pub uses_actions: bool,
}

impl Structure {
    pub const GENERAL: Structure = Structure { affine: false, uses_state: true, uses_actions: true };
}

/// Vector-valued coefficient `g(t, x, u)`.
pub trait VectorField: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);

    /// Jacobian with respect to the state, `dim × n`.
    fn jac_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut Mat) {
        fd_jacobian(self.dim(), x, |xx, o| self.eval(t, xx, u, o), out);
    }

    /// Jacobian with respect to the joint action, `dim × Σdᵢ`.
    fn jac_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut Mat) {
        fd_jacobian(self.dim(), u, |uu, o| self.eval(t, x, uu, o), out);
    }

    fn structure(&self) -> Structure {
        Structure::GENERAL
    }
}

/// Scalar coefficient `c(t, x, u)` (running or terminal cost).
pub trait ScalarField: Send + Sync + fmt::Debug {
    fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> f64;

    fn grad_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        fd_gradient(x, |xx| self.eval(t, xx, u), out);
    }

    fn grad_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        fd_gradient(u, |uu| self.eval(t, x, uu), out);
    }

    /// Convexity in `(x, u)` when known analytically.
    fn known_convex(&self) -> Option<bool> {
        None
    }
}

/// Diffusion coefficient `σ(t, x, u)`, an `n × m` matrix.
pub trait DiffusionField: Send + Sync + fmt::Debug {
    fn shape(&self) -> (usize, usize);
    fn eval(&self, t: f64, x: &[f64], u: &[f64], out: &mut Mat);

    /// Gradients of `tr(qᵀ σ)` with respect to `x` and `u`, accumulated into `gx`, `gu`.
    fn trace_grad(&self, t: f64, x: &[f64], u: &[f64], q: &Mat, gx: &mut [f64], gu: &mut [f64]) {
        let (r, c) = self.shape();
        let mut s = Mat::zeros(r, c);
        let tr = |s: &Mat| s.as_slice().iter().zip(q.as_slice()).map(|(a, b)| a * b).sum::<f64>();
        let mut xx = x.to_vec();
        for k in 0..x.len() {
            let h = FD_STEP * (1.0 + x[k].abs());
            xx[k] = x[k] + h;
            self.eval(t, &xx, u, &mut s);
            let up = tr(&s);
            xx[k] = x[k] - h;
            self.eval(t, &xx, u, &mut s);
            let dn = tr(&s);
            xx[k] = x[k];
            gx[k] += (up - dn) / (2.0 * h);
        }
        let mut uu = u.to_vec();
        for k in 0..u.len() {
            let h = FD_STEP * (1.0 + u[k].abs());
            uu[k] = u[k] + h;
            self.eval(t, x, &uu, &mut s);
            let up = tr(&s);
            uu[k] = u[k] - h;
            self.eval(t, x, &uu, &mut s);
            let dn = tr(&s);
            uu[k] = u[k];
            gu[k] += (up - dn) / (2.0 * h);
        }
    }

    fn is_constant(&self) -> bool {
        false
    }
}

fn fd_jacobian(dim: usize, at: &[f64], f: impl Fn(&[f64], &mut [f64]), out: &mut Mat) {
    let mut p = at.to_vec();
    let mut up = vec![0.0; dim];
    let mut dn = vec![0.0; dim];
    for k in 0..at.len() {
        let h = FD_STEP * (1.0 + at[k].abs());
        p[k] = at[k] + h;
        f(&p, &mut up);
        p[k] = at[k] - h;
        f(&p, &mut dn);
        p[k] = at[k];
        for i in 0..dim {
            out[(i, k)] = (up[i] - dn[i]) / (2.0 * h);
        }
    }
}

fn fd_gradient(at: &[f64], f: impl Fn(&[f64]) -> f64, out: &mut [f64]) {
    let mut p = at.to_vec();
    for k in 0..at.len() {
        let h = FD_STEP * (1.0 + at[k].abs());
        p[k] = at[k] + h;
        let up = f(&p);
        p[k] = at[k] - h;
        let dn = f(&p);
        p[k] = at[k];
        out[k] = (up - dn) / (2.0 * h);
    }
}

fn piece_index(switch_times: &[f64], t: f64) -> usize {
    switch_times.iter().take_while(|&&s| s <= t + 1e-12).count()
}

/// One `x_i · u_k` product term of a bilinear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BilinearTerm {
    pub out: usize,
    pub x: usize,
    pub u: usize,
    pub coef: f64,
}

/// Programmatic vector field.
#[derive(Clone)]
pub struct CustomVector(pub Arc<dyn VectorField>);

impl fmt::Debug for CustomVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Custom({:?})", self.0)
    }
}

/// Named vector-valued families (drift and observation maps).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum VectorFamily {
    /// Identically zero output of the given dimension.
    Zero { dim: usize },
    /// `a x + b u + c`.
    Linear {
        a: Mat,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        b: Option<Mat>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<Vec<f64>>,
    },
    /// Linear part plus `Σ coef · x_i · u_k` terms.
    Bilinear {
        a: Mat,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        b: Option<Mat>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<Vec<f64>>,
        terms: Vec<BilinearTerm>,
    },
    /// `scale ⊙ tanh(a x + b u + c)`, bounded by `|scale|`.
    Saturation {
        a: Mat,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        b: Option<Mat>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        c: Option<Vec<f64>>,
        scale: Vec<f64>,
    },
    /// Piecewise-in-time: `pieces[i]` applies on `[switch_times[i-1], switch_times[i])`.
    TimeSwitched { switch_times: Vec<f64>, pieces: Vec<VectorFamily> },
    #[serde(skip)]
    Custom(CustomVector),
}

impl VectorFamily {
    pub fn custom(field: impl VectorField + 'static) -> Self {
        VectorFamily::Custom(CustomVector(Arc::new(field)))
    }

    pub fn linear(a: Mat, b: Option<Mat>, c: Option<Vec<f64>>) -> Self {
        VectorFamily::Linear { a, b, c }
    }

    /// Scalar helper: `a x + b·u + c` for a one-dimensional state.
    pub fn scalar_linear(a: f64, b: &[f64], c: f64) -> Self {
        VectorFamily::Linear {
            a: Mat::scalar(a),
            b: if b.is_empty() { None } else { Some(Mat::from_rows(&[b.to_vec()])) },
            c: if c == 0.0 { None } else { Some(vec![c]) },
        }
    }

    fn affine_parts(&self) -> Option<(&Mat, Option<&Mat>, Option<&Vec<f64>>)> {
        match self {
            VectorFamily::Linear { a, b, c }
            | VectorFamily::Bilinear { a, b, c, .. }
            | VectorFamily::Saturation { a, b, c, .. } => Some((a, b.as_ref(), c.as_ref())),
            _ => None,
        }
    }

    fn eval_affine(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let (a, b, c) = self.affine_parts().expect("affine family");
        match c {
            Some(c) => out.copy_from_slice(c),
            None => out.iter_mut().for_each(|o| *o = 0.0),
        }
        a.mul_vec_add(x, out);
        if let Some(b) = b {
            b.mul_vec_add(u, out);
        }
    }

    /// Declared input dimensions `(n, du)` where they are fixed by the parameters.
    pub fn declared_inputs(&self) -> (Option<usize>, Option<usize>) {
        match self.affine_parts() {
            Some((a, b, _)) => (Some(a.cols()), b.map(|b| b.cols())),
            None => (None, None),
        }
    }
}

impl VectorField for VectorFamily {
    fn dim(&self) -> usize {
        match self {
            VectorFamily::Zero { dim } => *dim,
            VectorFamily::Linear { a, .. }
            | VectorFamily::Bilinear { a, .. }
            | VectorFamily::Saturation { a, .. } => a.rows(),
            VectorFamily::TimeSwitched { pieces, .. } => pieces.first().map_or(0, |p| p.dim()),
            VectorFamily::Custom(c) => c.0.dim(),
        }
    }

    fn eval(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        match self {
            VectorFamily::Zero { .. } => out.iter_mut().for_each(|o| *o = 0.0),
            VectorFamily::Linear { .. } => self.eval_affine(x, u, out),
            VectorFamily::Bilinear { terms, .. } => {
                self.eval_affine(x, u, out);
                for term in terms {
                    out[term.out] += term.coef * x[term.x] * u[term.u];
                }
            }
            VectorFamily::Saturation { scale, .. } => {
                self.eval_affine(x, u, out);
                for (o, s) in out.iter_mut().zip(scale) {
                    *o = s * o.tanh();
                }
            }
            VectorFamily::TimeSwitched { switch_times, pieces } => {
                pieces[piece_index(switch_times, t)].eval(t, x, u, out)
            }
            VectorFamily::Custom(c) => c.0.eval(t, x, u, out),
        }
    }

    fn jac_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut Mat) {
        match self {
            VectorFamily::Zero { .. } => out.fill(0.0),
            VectorFamily::Linear { a, .. } => out.as_mut_slice().copy_from_slice(a.as_slice()),
            VectorFamily::Bilinear { a, terms, .. } => {
                out.as_mut_slice().copy_from_slice(a.as_slice());
                for term in terms {
                    out[(term.out, term.x)] += term.coef * u[term.u];
                }
            }
            VectorFamily::Saturation { a, scale, .. } => {
                let mut z = vec![0.0; a.rows()];
                self.eval_affine(x, u, &mut z);
                for i in 0..a.rows() {
                    let d = scale[i] * (1.0 - z[i].tanh().powi(2));
                    for k in 0..a.cols() {
                        out[(i, k)] = d * a[(i, k)];
                    }
                }
            }
            VectorFamily::TimeSwitched { switch_times, pieces } => {
                pieces[piece_index(switch_times, t)].jac_x(t, x, u, out)
            }
            VectorFamily::Custom(c) => c.0.jac_x(t, x, u, out),
        }
    }

    fn jac_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut Mat) {
        match self {
            VectorFamily::Zero { .. } => out.fill(0.0),
            VectorFamily::Linear { b, .. } => match b {
                Some(b) => out.as_mut_slice().copy_from_slice(b.as_slice()),
                None => out.fill(0.0),
            },
            VectorFamily::Bilinear { b, terms, .. } => {
                match b {
                    Some(b) => out.as_mut_slice().copy_from_slice(b.as_slice()),
                    None => out.fill(0.0),
                }
                for term in terms {
                    out[(term.out, term.u)] += term.coef * x[term.x];
                }
            }
            VectorFamily::Saturation { a, b, scale, .. } => {
                out.fill(0.0);
                if let Some(b) = b {
                    let mut z = vec![0.0; a.rows()];
                    self.eval_affine(x, u, &mut z);
                    for i in 0..a.rows() {
                        let d = scale[i] * (1.0 - z[i].tanh().powi(2));
                        for k in 0..b.cols() {
                            out[(i, k)] = d * b[(i, k)];
                        }
                    }
                }
            }
            VectorFamily::TimeSwitched { switch_times, pieces } => {
                pieces[piece_index(switch_times, t)].jac_u(t, x, u, out)
            }
            VectorFamily::Custom(c) => c.0.jac_u(t, x, u, out),
        }
    }

    fn structure(&self) -> Structure {
        let nonzero = |m: Option<&Mat>| m.is_some_and(|m| m.as_slice().iter().any(|v| *v != 0.0));
        match self {
            VectorFamily::Zero { .. } => Structure { affine: true, uses_state: false, uses_actions: false },
            VectorFamily::Linear { a, b, .. } => Structure {
                affine: true,
                uses_state: nonzero(Some(a)),
                uses_actions: nonzero(b.as_ref()),
            },
            VectorFamily::Bilinear { a, b, terms, .. } => {
                let live = terms.iter().any(|t| t.coef != 0.0);
                Structure {
                    affine: !live,
                    uses_state: nonzero(Some(a)) || live,
                    uses_actions: nonzero(b.as_ref()) || live,
                }
            }
            VectorFamily::Saturation { a, b, .. } => Structure {
                affine: false,
                uses_state: nonzero(Some(a)),
                uses_actions: nonzero(b.as_ref()),
            },
            VectorFamily::TimeSwitched { pieces, .. } => {
                pieces.iter().map(|p| p.structure()).fold(
                    Structure { affine: true, uses_state: false, uses_actions: false },
                    |acc, s| Structure {
                        affine: acc.affine && s.affine,
                        uses_state: acc.uses_state || s.uses_state,
                        uses_actions: acc.uses_actions || s.uses_actions,
                    },
                )
            }
            VectorFamily::Custom(c) => c.0.structure(),
        }
    }
}

/// Programmatic scalar field.
#[derive(Clone)]
pub struct CustomScalar(pub Arc<dyn ScalarField>);

impl fmt::Debug for CustomScalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Custom({:?})", self.0)
    }
}

/// Named scalar families (running and terminal costs).
///
/// `Quadratic` evaluates `xᵀ·xx·x + uᵀ·uu·u + 2·xᵀ·xu·u + x·gx + u·gu + c`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ScalarFamily {
    Constant { value: f64 },
    Quadratic {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        xx: Option<Mat>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        uu: Option<Mat>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        xu: Option<Mat>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gx: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        gu: Option<Vec<f64>>,
        #[serde(default)]
        c: f64,
    },
    TimeSwitched { switch_times: Vec<f64>, pieces: Vec<ScalarFamily> },
    #[serde(skip)]
    Custom(CustomScalar),
}

impl ScalarFamily {
    pub fn custom(field: impl ScalarField + 'static) -> Self {
        ScalarFamily::Custom(CustomScalar(Arc::new(field)))
    }

    pub fn zero() -> Self {
        ScalarFamily::Constant { value: 0.0 }
    }

    /// Quadratic in the state only: `xᵀ·xx·x + gx·x + c`.
    pub fn state_quadratic(xx: Option<Mat>, gx: Option<Vec<f64>>, c: f64) -> Self {
        ScalarFamily::Quadratic { xx, uu: None, xu: None, gx, gu: None, c }
    }

    pub fn quadratic(xx: Option<Mat>, uu: Option<Mat>, xu: Option<Mat>) -> Self {
        ScalarFamily::Quadratic { xx, uu, xu, gx: None, gu: None, c: 0.0 }
    }
}

fn quad_form(m: &Mat, a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..m.rows() {
        for j in 0..m.cols() {
            s += a[i] * m[(i, j)] * b[j];
        }
    }
    s
}

impl ScalarField for ScalarFamily {
    fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        match self {
            ScalarFamily::Constant { value } => *value,
            ScalarFamily::Quadratic { xx, uu, xu, gx, gu, c } => {
                let mut v = *c;
                if let Some(m) = xx {
                    v += quad_form(m, x, x);
                }
                if let Some(m) = uu {
                    v += quad_form(m, u, u);
                }
                if let Some(m) = xu {
                    v += 2.0 * quad_form(m, x, u);
                }
                if let Some(g) = gx {
                    v += g.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
                if let Some(g) = gu {
                    v += g.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
                }
                v
            }
            ScalarFamily::TimeSwitched { switch_times, pieces } => {
                pieces[piece_index(switch_times, t)].eval(t, x, u)
            }
            ScalarFamily::Custom(c) => c.0.eval(t, x, u),
        }
    }

    fn grad_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        match self {
            ScalarFamily::Constant { .. } => out.iter_mut().for_each(|o| *o = 0.0),
            ScalarFamily::Quadratic { xx, xu, gx, .. } => {
                match gx {
                    Some(g) => out.copy_from_slice(g),
                    None => out.iter_mut().for_each(|o| *o = 0.0),
                }
                if let Some(m) = xx {
                    m.mul_vec_add(x, out);
                    m.tr_mul_vec_add(x, out);
                }
                if let Some(m) = xu {
                    let mut tmp = vec![0.0; x.len()];
                    m.mul_vec_add(u, &mut tmp);
                    for (o, v) in out.iter_mut().zip(tmp) {
                        *o += 2.0 * v;
                    }
                }
            }
            ScalarFamily::TimeSwitched { switch_times, pieces } => {
                pieces[piece_index(switch_times, t)].grad_x(t, x, u, out)
            }
            ScalarFamily::Custom(c) => c.0.grad_x(t, x, u, out),
        }
    }

    fn grad_u(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        match self {
            ScalarFamily::Constant { .. } => out.iter_mut().for_each(|o| *o = 0.0),
            ScalarFamily::Quadratic { uu, xu, gu, .. } => {
                match gu {
                    Some(g) => out.copy_from_slice(g),
                    None => out.iter_mut().for_each(|o| *o = 0.0),
                }
                if let Some(m) = uu {
                    m.mul_vec_add(u, out);
                    m.tr_mul_vec_add(u, out);
                }
                if let Some(m) = xu {
                    let mut tmp = vec![0.0; u.len()];
                    m.tr_mul_vec_add(x, &mut tmp);
                    for (o, v) in out.iter_mut().zip(tmp) {
                        *o += 2.0 * v;
                    }
                }
            }
            ScalarFamily::TimeSwitched { switch_times, pieces } => {
                pieces[piece_index(switch_times, t)].grad_u(t, x, u, out)
            }
            ScalarFamily::Custom(c) => c.0.grad_u(t, x, u, out),
        }
    }

    fn known_convex(&self) -> Option<bool> {
        match self {
            ScalarFamily::Constant { .. } => Some(true),
            ScalarFamily::Quadratic { xx, uu, xu, .. } => {
                let n = xx.as_ref().map(|m| m.rows()).or(xu.as_ref().map(|m| m.rows())).unwrap_or(0);
                let du = uu.as_ref().map(|m| m.rows()).or(xu.as_ref().map(|m| m.cols())).unwrap_or(0);
                let mut h = nalgebra::DMatrix::<f64>::zeros(n + du, n + du);
                if let Some(m) = xx {
                    for i in 0..n {
                        for j in 0..n {
                            h[(i, j)] += m[(i, j)] + m[(j, i)];
                        }
                    }
                }
                if let Some(m) = uu {
                    for i in 0..du {
                        for j in 0..du {
                            h[(n + i, n + j)] += m[(i, j)] + m[(j, i)];
                        }
                    }
                }
                if let Some(m) = xu {
                    for i in 0..n {
                        for j in 0..du {
                            h[(i, n + j)] += 2.0 * m[(i, j)];
                            h[(n + j, i)] += 2.0 * m[(i, j)];
                        }
                    }
                }
                if n + du == 0 {
                    return Some(true);
                }
                let min_ev = h.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
                Some(min_ev >= -1e-10)
            }
            ScalarFamily::TimeSwitched { pieces, .. } => {
                pieces.iter().try_fold(true, |acc, p| p.known_convex().map(|c| acc && c))
            }
            ScalarFamily::Custom(c) => c.0.known_convex(),
        }
    }
}

/// Programmatic diffusion.
#[derive(Clone)]
pub struct CustomDiffusion(pub Arc<dyn DiffusionField>);

impl fmt::Debug for CustomDiffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Custom({:?})", self.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum DiffusionFamily {
    /// State- and action-independent `n × m` matrix.
    Constant { s: Mat },
    #[serde(skip)]
    Custom(CustomDiffusion),
}

impl DiffusionFamily {
    pub fn custom(field: impl DiffusionField + 'static) -> Self {
        DiffusionFamily::Custom(CustomDiffusion(Arc::new(field)))
    }
}

impl DiffusionField for DiffusionFamily {
    fn shape(&self) -> (usize, usize) {
        match self {
            DiffusionFamily::Constant { s } => (s.rows(), s.cols()),
            DiffusionFamily::Custom(c) => c.0.shape(),
        }
    }

    fn eval(&self, t: f64, x: &[f64], u: &[f64], out: &mut Mat) {
        match self {
            DiffusionFamily::Constant { s } => out.as_mut_slice().copy_from_slice(s.as_slice()),
            DiffusionFamily::Custom(c) => c.0.eval(t, x, u, out),
        }
    }

    fn trace_grad(&self, t: f64, x: &[f64], u: &[f64], q: &Mat, gx: &mut [f64], gu: &mut [f64]) {
        match self {
            DiffusionFamily::Constant { .. } => {}
            DiffusionFamily::Custom(c) => c.0.trace_grad(t, x, u, q, gx, gu),
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            DiffusionFamily::Constant { .. } => true,
            DiffusionFamily::Custom(c) => c.0.is_constant(),
        }
    }
}

/// Closure-backed vector field; derivatives fall back to central differences.
pub struct FnVectorField<F> {
    pub dim: usize,
    pub f: F,
    pub name: &'static str,
}

impl<F> fmt::Debug for FnVectorField<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnVectorField({})", self.name)
    }
}

impl<F> VectorField for FnVectorField<F>
where
    F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.f)(t, x, u, out)
    }
}

/// Closure-backed scalar field.
pub struct FnScalarField<F> {
    pub f: F,
    pub name: &'static str,
}

impl<F> fmt::Debug for FnScalarField<F> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FnScalarField({})", self.name)
    }
}

impl<F> ScalarField for FnScalarField<F>
where
    F: Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync,
{
    fn eval(&self, t: f64, x: &[f64], u: &[f64]) -> f64 {
        (self.f)(t, x, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn saturation_jacobian_matches_differences() {
        let fam = VectorFamily::Saturation {
            a: Mat::from_rows(&[vec![0.7, -0.2]]),
            b: Some(Mat::from_rows(&[vec![0.3]])),
            c: Some(vec![0.1]),
            scale: vec![2.0],
        };
        let (x, u) = ([0.4, -1.1], [0.5]);
        let mut analytic = Mat::zeros(1, 2);
        fam.jac_x(0.0, &x, &u, &mut analytic);
        let mut numeric = Mat::zeros(1, 2);
        fd_jacobian(1, &x, |xx, o| fam.eval(0.0, xx, &u, o), &mut numeric);
        for k in 0..2 {
            assert!((analytic[(0, k)] - numeric[(0, k)]).abs() < 1e-8);
        }
        let mut ju = Mat::zeros(1, 1);
        fam.jac_u(0.0, &x, &u, &mut ju);
        let mut nu = Mat::zeros(1, 1);
        fd_jacobian(1, &u, |uu, o| fam.eval(0.0, &x, uu, o), &mut nu);
        assert!((ju[(0, 0)] - nu[(0, 0)]).abs() < 1e-8);
    }

    #[test]
    fn quadratic_team_cost_gradient() {
        // (u1 + u2 - x)^2 + u1^2 + u2^2
        let cost = ScalarFamily::Quadratic {
            xx: Some(Mat::scalar(1.0)),
            uu: Some(Mat::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]])),
            xu: Some(Mat::from_rows(&[vec![-1.0, -1.0]])),
            gx: None,
            gu: None,
            c: 0.0,
        };
        let (x, u) = ([1.5], [0.2, -0.3]);
        let v = cost.eval(0.0, &x, &u);
        assert!((v - ((0.2 - 0.3 - 1.5f64).powi(2) + 0.04 + 0.09)).abs() < 1e-12);
        let mut gu = [0.0; 2];
        cost.grad_u(0.0, &x, &u, &mut gu);
        let r = 0.2 - 0.3 - 1.5;
        assert!((gu[0] - (2.0 * r + 0.4)).abs() < 1e-12);
        assert!((gu[1] - (2.0 * r - 0.6)).abs() < 1e-12);
        assert_eq!(cost.known_convex(), Some(true));
    }

    #[test]
    fn time_switched_selects_piece() {
        let fam = VectorFamily::TimeSwitched {
            switch_times: vec![1.0],
            pieces: vec![VectorFamily::scalar_linear(1.0, &[1.0, 0.0], 0.0), VectorFamily::scalar_linear(1.0, &[0.0, -1.0], 0.0)],
        };
        let mut out = [0.0];
        fam.eval(0.0, &[2.0], &[0.5, 0.25], &mut out);
        assert_eq!(out[0], 2.5);
        fam.eval(1.0, &[2.0], &[0.5, 0.25], &mut out);
        assert_eq!(out[0], 1.75);
    }

    #[test]
    fn family_json_round_trip() {
        let fam = VectorFamily::Saturation { a: Mat::scalar(1.0), b: None, c: None, scale: vec![1.0] };
        let s = serde_json::to_string(&fam).unwrap();
        assert!(s.contains("\"family\":\"saturation\""));
        let back: VectorFamily = serde_json::from_str(&s).unwrap();
        let mut o1 = [0.0];
        let mut o2 = [0.0];
        fam.eval(0.0, &[0.3], &[], &mut o1);
        back.eval(0.0, &[0.3], &[], &mut o2);
        assert_eq!(o1, o2);
    }
}
