//! Small dense matrices with a JSON-friendly layout (array of rows).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scalar(v: f64) -> Self {
        Mat { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Mat::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged matrix rows");
            data.extend_from_slice(row);
        }
        Mat { rows: r, cols: c, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len());
        Mat { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `out += self * v`
    pub fn mul_vec_add(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        self.mul_vec_add(v, &mut out);
        out
    }

    /// `out += selfᵀ * v`
    pub fn tr_mul_vec_add(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, vi) in v.iter().enumerate() {
            if *vi == 0.0 {
                continue;
            }
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * vi;
            }
        }
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| {
                (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol * (1.0 + self[(i, j)].abs()))
            })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub fn from_nalgebra(m: &DMatrix<f64>) -> Mat {
        let mut out = Mat::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out[(i, j)] = m[(i, j)];
            }
        }
        out
    }

    /// Symmetric positive-definite square root, inverse square root, inverse and
    /// log-determinant. `None` when the matrix is not symmetric positive definite.
    pub fn spd_factors(&self) -> Option<SpdFactors> {
        if !self.is_square() || !self.all_finite() || !self.is_symmetric(1e-9) {
            return None;
        }
        let eig = self.to_nalgebra().symmetric_eigen();
        let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        if max_ev <= 0.0 || eig.eigenvalues.iter().any(|&l| l <= max_ev * 1e-13 || !l.is_finite()) {
            return None;
        }
        let q = &eig.eigenvectors;
        let build = |g: &dyn Fn(f64) -> f64| {
            let d = DMatrix::from_diagonal(&DVector::from_iterator(
                eig.eigenvalues.len(),
                eig.eigenvalues.iter().map(|&l| g(l)),
            ));
            Mat::from_nalgebra(&(q * d * q.transpose()))
        };
        Some(SpdFactors {
            sqrt: build(&|l| l.sqrt()),
            inv_sqrt: build(&|l| 1.0 / l.sqrt()),
            inv: build(&|l| 1.0 / l),
            log_det: eig.eigenvalues.iter().map(|l| l.ln()).sum(),
        })
    }

    /// Inverse and log|det| of a general square matrix, `None` when singular.
    pub fn inverse_and_logdet(&self) -> Option<(Mat, f64)> {
        if !self.is_square() || !self.all_finite() {
            return None;
        }
        let lu = self.to_nalgebra().lu();
        let det = lu.determinant();
        let scale = self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        if !det.is_finite() || det.abs() <= f64::EPSILON * scale.powi(self.rows as i32) * 1e3 || det == 0.0 {
            return None;
        }
        let inv = lu.try_inverse()?;
        Some((Mat::from_nalgebra(&inv), det.abs().ln()))
    }
}

/// Factorizations of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactors {
    pub sqrt: Mat,
    pub inv_sqrt: Mat,
    pub inv: Mat,
    pub log_det: f64,
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..self.rows).map(|i| self.row(i)).collect();
        rows.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        if let Some(first) = rows.first() {
            if rows.iter().any(|r| r.len() != first.len()) {
                return Err(serde::de::Error::custom("ragged matrix rows"));
            }
        }
        Ok(Mat::from_rows(&rows))
    }
}

/// Solve the symmetric positive-definite system `a x = b` for several right-hand
/// sides, adding `ridge` to the diagonal and growing it until Cholesky succeeds.
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let n = a.nrows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0_f64, f64::max).max(1.0);
    let mut lambda = ridge.max(0.0);
    for _ in 0..40 {
        let mut reg = a.clone();
        for i in 0..n {
            reg[(i, i)] += lambda;
        }
        if let Some(ch) = reg.cholesky() {
            return ch.solve(b);
        }
        lambda = if lambda == 0.0 { 1e-14 * scale } else { lambda * 10.0 };
    }
    DMatrix::zeros(n, b.ncols())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spd_factors_of_diagonal() {
        let m = Mat::diag(&[4.0, 9.0]);
        let f = m.spd_factors().unwrap();
        assert!((f.sqrt[(0, 0)] - 2.0).abs() < 1e-12);
        assert!((f.inv_sqrt[(1, 1)] - 1.0 / 3.0).abs() < 1e-12);
        assert!((f.log_det - 36f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_matrix_is_not_spd() {
        assert!(Mat::zeros(1, 1).spd_factors().is_none());
        assert!(Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).spd_factors().is_none());
    }

    #[test]
    fn json_layout_is_rows() {
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, "[[1.0,2.0],[3.0,4.0]]");
        let back: Mat = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn singular_gain_detected() {
        assert!(Mat::zeros(2, 2).inverse_and_logdet().is_none());
        let (inv, ld) = Mat::diag(&[2.0, 0.5]).inverse_and_logdet().unwrap();
        assert!((inv[(0, 0)] - 0.5).abs() < 1e-14);
        assert!(ld.abs() < 1e-14);
    }
}
