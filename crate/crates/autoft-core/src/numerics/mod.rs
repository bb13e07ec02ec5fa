//! Deterministic dense linear algebra and elementwise nonlinearities.
//!
//! Everything here is 64-bit, allocation-backed and pure: given finite
//! inputs, every operation produces finite outputs and identical results
//! across runs and platforms. No BLAS, no SIMD intrinsics, no threads.

mod gradcheck;
mod rng;

pub use gradcheck::{finite_difference_check, DEFAULT_FD_STEP};
pub use rng::{gumbel_from_uniform, sample_gumbel, SeededRng};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of `f64`. Vectors are stored as single-column
/// matrices so that parameter banks, gradients and optimizer buffers all
/// share one shape-checked container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    /// Builds a matrix from row-major values. Fails if the value count does
    /// not equal `rows * cols` or either dimension is zero.
    pub fn from_values(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Parameter(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Parameter(format!(
                "expected {} values for a {rows}x{cols} matrix, got {}",
                rows * cols,
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Single-column matrix wrapping a vector.
    pub fn column(values: Vec<f64>) -> Self {
        let rows = values.len();
        Self {
            rows,
            cols: 1,
            values,
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

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        debug_assert!(r < self.rows);
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        debug_assert!(r < self.rows);
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Matrix of the same shape filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    /// Elementwise `self += other`. Shapes must match.
    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_assign", self.shape(), other.shape()));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
        Ok(())
    }

    /// Elementwise scale in place.
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.values.iter()
    }
}

/// Standard matrix product with 64-bit accumulation.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::shape("matmul", a.shape(), b.shape()));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = &mut out.values[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Elementwise `max(0, x)`.
pub fn relu(x: &DenseMatrix) -> DenseMatrix {
    DenseMatrix {
        rows: x.rows,
        cols: x.cols,
        values: x.values.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Numerically stable logistic function: no overflow for any finite input.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Temperature softmax `exp(l_i/tau) / sum_j exp(l_j/tau)`, computed with
/// max-subtraction. Output sums to 1 within 1e-12.
pub fn softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !tau.is_finite() || tau <= 0.0 {
        return Err(Error::Parameter(format!("softmax temperature must be > 0, got {tau}")));
    }
    if logits.is_empty() {
        return Err(Error::Parameter("softmax of empty logits".into()));
    }
    let scaled: Vec<f64> = logits.iter().map(|&l| l / tau).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| e / sum).collect())
}

/// `log(softmax(logits))` at temperature 1, max-subtracted.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - max - log_sum).collect()
}

/// Dot product of equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `m * x` for a matrix and a column vector given as a slice.
pub(crate) fn matvec(m: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.cols, x.len());
    (0..m.rows).map(|i| dot(m.row(i), x)).collect()
}

/// `m^T * x`.
pub(crate) fn matvec_t(m: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.rows, x.len());
    let mut out = vec![0.0; m.cols];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += xi * mij;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seeded_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> DenseMatrix {
        let values = (0..rows * cols).map(|_| rng.uniform(-1.0, 1.0)).collect();
        DenseMatrix::from_values(rows, cols, values).unwrap()
    }

    #[test]
    fn matmul_identity_preserves() {
        let mut rng = SeededRng::new(7);
        let m = seeded_matrix(&mut rng, 3, 3);
        let out = matmul(&DenseMatrix::identity(3), &m).unwrap();
        assert_eq!(out, m);
    }

    #[test]
    fn matmul_scalar_case() {
        let a = DenseMatrix::from_values(1, 1, vec![2.0]).unwrap();
        let b = DenseMatrix::from_values(1, 1, vec![3.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = SeededRng::new(42);
        let a = seeded_matrix(&mut rng, 3, 4);
        let b = seeded_matrix(&mut rng, 4, 2);
        let fast = matmul(&a, &b).unwrap();
        // naive reference
        for i in 0..3 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += a.get(i, k) * b.get(k, j);
                }
                assert!((fast.get(i, j) - acc).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("(2, 3)"), "error should name shapes: {msg}");
    }

    #[test]
    fn matmul_associativity_on_seeded_matrices() {
        let mut rng = SeededRng::new(3);
        let a = seeded_matrix(&mut rng, 4, 5);
        let b = seeded_matrix(&mut rng, 5, 3);
        let c = seeded_matrix(&mut rng, 3, 6);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let max_diff = left
            .iter()
            .zip(right.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff < 1e-9, "associativity violated by {max_diff}");
    }

    #[test]
    fn relu_sign_cases() {
        let x = DenseMatrix::from_values(1, 3, vec![1.0, -2.0, 0.0]).unwrap();
        assert_eq!(relu(&x).as_slice(), &[1.0, 0.0, 0.0]);
        let neg = DenseMatrix::from_values(1, 3, vec![-1.0, -0.5, -7.0]).unwrap();
        assert!(relu(&neg).iter().all(|&v| v == 0.0));
        let pos = DenseMatrix::from_values(1, 3, vec![0.5, 1.5, 2.0]).unwrap();
        assert_eq!(relu(&pos), pos);
    }

    #[test]
    fn sigmoid_symmetry_and_saturation() {
        assert_eq!(sigmoid(0.0), 0.5);
        for &x in &[-3.7, -0.2, 0.9, 12.0] {
            assert!((sigmoid(x) - (1.0 - sigmoid(-x))).abs() < 1e-15);
        }
        let high = sigmoid(500.0);
        assert!(high.is_finite());
        assert!(high > 1.0 - 1e-12 && high <= 1.0);
        assert!(sigmoid(-500.0).is_finite());
    }

    #[test]
    fn softmax_closed_forms() {
        let sym = softmax(&[4.2, 4.2], 1.0).unwrap();
        assert!((sym[0] - 0.5).abs() < 1e-15 && (sym[1] - 0.5).abs() < 1e-15);

        let v = softmax(&[3.0_f64.ln(), 0.0], 1.0).unwrap();
        assert!((v[0] - 0.75).abs() < 1e-12);
        assert!((v[1] - 0.25).abs() < 1e-12);

        let cold = softmax(&[1.0, 0.0], 0.01).unwrap();
        assert!(cold[0] >= 0.999);

        assert!(softmax(&[1.0, 0.0], 0.0).is_err());
        assert!(softmax(&[1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let logits = [0.3, -1.2, 2.5];
        let ls = log_softmax(&logits);
        let s = softmax(&logits, 1.0).unwrap();
        for (l, p) in ls.iter().zip(&s) {
            assert!((l.exp() - p).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_probability_vector(
            logits in proptest::collection::vec(-50.0f64..50.0, 1..6),
            tau in 1e-3f64..1e3,
        ) {
            let p = softmax(&logits, tau).unwrap();
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            let sum: f64 = p.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gumbel_analytic_fixed_point() {
        // u = 1/e  =>  -log(-log(u)) = -log(1) = 0
        assert!(gumbel_from_uniform((-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn gumbel_mean_matches_euler_mascheroni() {
        const EULER_MASCHERONI: f64 = 0.577_215_664_901_532_9;
        let mut rng = SeededRng::new(2024);
        let n = 1_000_000;
        let mean = (0..n).map(|_| sample_gumbel(&mut rng)).sum::<f64>() / n as f64;
        assert!(
            (mean - EULER_MASCHERONI).abs() < 0.01,
            "Gumbel sample mean {mean} too far from Euler-Mascheroni"
        );
    }

    #[test]
    fn gumbel_deciles_match_cdf() {
        // Gumbel(0,1) CDF is exp(-exp(-x)); check the empirical CDF at the
        // deciles of the true distribution.
        let mut rng = SeededRng::new(99);
        let n = 1_000_000;
        let samples: Vec<f64> = (0..n).map(|_| sample_gumbel(&mut rng)).collect();
        for decile in 1..10 {
            let q = decile as f64 / 10.0;
            let x_q = -(-q.ln()).ln();
            let frac = samples.iter().filter(|&&s| s <= x_q).count() as f64 / n as f64;
            assert!(
                (frac - q).abs() < 0.005,
                "decile {q}: empirical {frac} vs expected {q}"
            );
        }
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = SeededRng::new(123456);
        let mut b = SeededRng::new(123456);
        for _ in 0..1000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::new(123456);
        let mut d = SeededRng::new(123457);
        let same = (0..100).all(|_| c.next_u64() == d.next_u64());
        assert!(!same);
    }

    #[test]
    fn derived_streams_are_stable_and_distinct() {
        let mut a = SeededRng::derive(9, &[1, 2, 3]);
        let mut b = SeededRng::derive(9, &[1, 2, 3]);
        assert_eq!(a.next_u64(), b.next_u64());
        let mut c = SeededRng::derive(9, &[1, 2, 4]);
        assert_ne!(SeededRng::derive(9, &[1, 2, 3]).next_u64(), c.next_u64());
    }

    #[test]
    fn gradcheck_quadratic_is_exact() {
        let f = |x: &[f64]| x[0] * x[0];
        let err = finite_difference_check(f, &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-8, "quadratic central difference error {err}");
    }

    #[test]
    fn gradcheck_constant_is_zero() {
        let f = |_: &[f64]| 4.5;
        let err = finite_difference_check(f, &[1.0, -2.0], &[0.0, 0.0], 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn gradcheck_rejects_non_finite() {
        let f = |x: &[f64]| x[0].ln();
        assert!(finite_difference_check(f, &[0.0], &[0.0], 1e-5).is_err());
    }
}
