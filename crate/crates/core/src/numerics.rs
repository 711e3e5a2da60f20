//! Dense row-major matrices and the handful of primitives the rest of the
//! crate is built on: normalization, tempered softmax, ReLU, SGD, and a
//! central-difference gradient checker.
//!
//! Products go through `matrixmultiply`'s strided GEMM so that transposed
//! operands never need to be materialized.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<MatrixRepr> for Matrix {
    type Error = Error;

    fn try_from(m: MatrixRepr) -> Result<Self> {
        Matrix::from_vec(m.rows, m.cols, m.data)
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix.
    pub fn row_vector(v: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics; a zero-width matrix has no meaningful rows
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Matrix, scale: f64) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, false)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, true, other, false)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        gemm(self, false, other, true)
    }

    /// Splits columns at `at`, the inverse of [`concat_cols`].
    pub fn split_cols(&self, at: usize) -> Result<(Matrix, Matrix)> {
        if at > self.cols {
            return Err(Error::shape(format!("split at {at} of {} cols", self.cols)));
        }
        let mut left = Matrix::zeros(self.rows, at);
        let mut right = Matrix::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let row = self.row(r);
            left.row_mut(r).copy_from_slice(&row[..at]);
            right.row_mut(r).copy_from_slice(&row[at..]);
        }
        Ok((left, right))
    }
}

fn gemm(a: &Matrix, ta: bool, b: &Matrix, tb: bool) -> Result<Matrix> {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != k2 {
        return Err(Error::shape(format!(
            "product of {m}x{k} and {k2}x{n}"
        )));
    }
    let mut c = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(c);
    }
    let (rsa, csa) = if ta { (1, a.cols) } else { (a.cols, 1) };
    let (rsb, csb) = if tb { (1, b.cols) } else { (b.cols, 1) };
    // SAFETY: strides describe exactly the buffers of `a`, `b` and `c`, whose
    // lengths were validated at construction; `c` is freshly allocated.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa as isize,
            csa as isize,
            b.data.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(c)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `v / ||v||₂`. The zero vector maps to itself.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Softmax of `scores / beta`, stabilized by subtracting the max score.
pub fn softmax_temp(scores: &[f64], beta: f64) -> Result<Vec<f64>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::param(format!("temperature must be positive, got {beta}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::param("non-finite score"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = scores.iter().map(|s| ((s - max) / beta).exp()).collect();
    let z: f64 = out.iter().sum();
    for p in &mut out {
        *p /= z;
    }
    Ok(out)
}

pub fn relu(m: &Matrix) -> Matrix {
    m.map(|x| if x < 0.0 { 0.0 } else { x })
}

/// Horizontal concatenation `[a ‖ b]`.
pub fn concat_cols(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::shape(format!(
            "concat of {} and {} rows",
            a.rows, b.rows
        )));
    }
    let cols = a.cols + b.cols;
    let mut out = Matrix::zeros(a.rows, cols);
    for r in 0..a.rows {
        let row = out.row_mut(r);
        row[..a.cols].copy_from_slice(a.row(r));
        row[a.cols..].copy_from_slice(b.row(r));
    }
    Ok(out)
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

/// `params - lr * grads`
pub fn sgd_step(params: &Matrix, grads: &Matrix, lr: f64) -> Result<Matrix> {
    if !(lr > 0.0) {
        return Err(Error::param(format!("learning rate must be positive, got {lr}")));
    }
    let mut out = params.clone();
    out.add_scaled(grads, -lr)?;
    Ok(out)
}

/// Outcome of comparing an analytic gradient to central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_index: (usize, usize),
    pub passed: bool,
}

/// Relative error with the denominator floored at 1e-8.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares `analytic_grad` against `(f(x+εe) − f(x−εe)) / 2ε` for every
/// entry of `point`. `passed` iff the worst relative error is below `tol`.
pub fn finite_diff_check<F>(
    loss_fn: F,
    point: &Matrix,
    analytic_grad: &Matrix,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&Matrix) -> f64,
{
    if point.shape() != analytic_grad.shape() {
        return Err(Error::shape("gradient shape differs from point"));
    }
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::param(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let mut probe = point.clone();
    let mut worst = (0.0_f64, (0, 0));
    for idx in 0..point.data.len() {
        let orig = probe.data[idx];
        probe.data[idx] = orig + eps;
        let up = loss_fn(&probe);
        probe.data[idx] = orig - eps;
        let down = loss_fn(&probe);
        probe.data[idx] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic_grad.data[idx], numeric);
        // NaN must register as a failure
        if err > worst.0 || err.is_nan() {
            let cols = point.cols.max(1);
            worst = (err, (idx / cols, idx % cols));
            if err.is_nan() {
                break;
            }
        }
    }
    Ok(GradCheckReport {
        max_relative_error: worst.0,
        worst_index: worst.1,
        passed: worst.0 < tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn normalize_examples() {
        assert!(close(&l2_normalize(&[3.0, 4.0]), &[0.6, 0.8], 1e-15));
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert!(close(&l2_normalize(&[1.0; 4]), &[0.5; 4], 1e-15));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[2.5, 2.5, 2.5], 0.3).unwrap();
        assert!(close(&p, &[1.0 / 3.0; 3], 1e-15));

        let e = std::f64::consts::E;
        let p = softmax_temp(&[1.0, 0.0], 1.0).unwrap();
        assert!(close(&p, &[e / (e + 1.0), 1.0 / (e + 1.0)], 1e-15));

        // 1 - p0 = 1 / (1 + e^20)
        let p = softmax_temp(&[1.0, 0.0], 0.05).unwrap();
        let tail = 1.0 / (1.0 + 20f64.exp());
        assert!((1.0 - p[0] - tail).abs() < 1e-15);
        assert!((tail - 2.06e-9).abs() < 1e-11);
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(matches!(
            softmax_temp(&[1.0], 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(softmax_temp(&[1.0], -1.0).is_err());
    }

    #[test]
    fn elementwise_and_products() {
        let m = Matrix::from_rows(&[[-1.0, 2.0]]).unwrap();
        assert_eq!(relu(&m).as_slice(), &[0.0, 2.0]);

        let a = Matrix::from_rows(&[[1.0]]).unwrap();
        let b = Matrix::from_rows(&[[2.0]]).unwrap();
        assert_eq!(concat_cols(&a, &b).unwrap().as_slice(), &[1.0, 2.0]);

        let x = Matrix::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &x).unwrap(), x);
        assert!(matches!(matmul(&x, &Matrix::zeros(3, 1)), Err(Error::Shape(_))));
        assert!(concat_cols(&x, &Matrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let a = Matrix::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[[1.0, -1.0], [0.5, 2.0]]).unwrap();
        assert_eq!(a.t_matmul(&b).unwrap(), a.transpose().matmul(&b).unwrap());
        let c = Matrix::from_rows(&[[1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(a.matmul_t(&c).unwrap(), a.matmul(&c.transpose()).unwrap());
    }

    #[test]
    fn sgd_examples() {
        let p = Matrix::from_rows(&[[1.0]]).unwrap();
        let g = Matrix::from_rows(&[[2.0]]).unwrap();
        assert_eq!(sgd_step(&p, &g, 0.5).unwrap().as_slice(), &[0.0]);
        assert_eq!(sgd_step(&p, &Matrix::zeros(1, 1), 0.5).unwrap(), p);

        let p = Matrix::from_rows(&[[1.0, 2.0]]).unwrap();
        let g = Matrix::from_rows(&[[0.1, -0.1]]).unwrap();
        let out = sgd_step(&p, &g, 0.1).unwrap();
        assert!(close(out.as_slice(), &[0.99, 2.01], 1e-15));
        assert!(sgd_step(&p, &Matrix::zeros(2, 1), 0.1).is_err());
    }

    #[test]
    fn gradcheck_quadratic_and_constant() {
        let x = Matrix::from_rows(&[[0.3, -1.2], [2.0, 0.7]]).unwrap();
        let half_sq = |m: &Matrix| 0.5 * m.as_slice().iter().map(|v| v * v).sum::<f64>();
        let r = finite_diff_check(half_sq, &x, &x, 1e-5, 1e-6).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_relative_error < 1e-6);

        let r = finite_diff_check(|_| 3.0, &x, &Matrix::zeros(2, 2), 1e-5, 1e-6).unwrap();
        assert!(r.passed);
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn gradcheck_tempered_log_softmax() {
        let beta = 0.05;
        let x = Matrix::row_vector(&[1.0, 0.0]);
        let p = softmax_temp(x.as_slice(), beta).unwrap();
        // d/ds_j [-log p_0] = (p_j - [j == 0]) / beta
        let g = Matrix::row_vector(&[(p[0] - 1.0) / beta, p[1] / beta]);
        // -log p_0 = log(1 + exp((s_1 - s_0) / beta)), evaluated without cancellation
        let f = |m: &Matrix| ((m.get(0, 1) - m.get(0, 0)) / beta).exp().ln_1p();
        let r = finite_diff_check(f, &x, &g, 1e-6, 1e-4).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn gradcheck_flags_wrong_gradient() {
        let x = Matrix::row_vector(&[1.0, 2.0]);
        let f = |m: &Matrix| 0.5 * m.as_slice().iter().map(|v| v * v).sum::<f64>();
        let bad = Matrix::row_vector(&[1.0, 2.5]);
        let r = finite_diff_check(f, &x, &bad, 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_index, (0, 1));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn vec_strategy() -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(-50.0f64..50.0, 1..20)
        }

        proptest! {
            #[test]
            fn softmax_is_a_distribution(s in vec_strategy(), beta in 0.01f64..1.0) {
                let p = softmax_temp(&s, beta).unwrap();
                let total: f64 = p.iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }

            #[test]
            fn softmax_shift_invariant(s in vec_strategy(), beta in 0.05f64..1.0, c in -100.0f64..100.0) {
                let p = softmax_temp(&s, beta).unwrap();
                let shifted: Vec<f64> = s.iter().map(|x| x + c).collect();
                let q = softmax_temp(&shifted, beta).unwrap();
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-10);
                }
            }

            #[test]
            fn normalize_idempotent_and_scale_free(v in vec_strategy(), k in 0.001f64..1000.0) {
                prop_assume!(norm(&v) > 1e-6);
                let n = l2_normalize(&v);
                prop_assert!(close(&l2_normalize(&n), &n, 1e-12));
                let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
                prop_assert!(close(&l2_normalize(&scaled), &n, 1e-12));
            }
        }
    }
}
