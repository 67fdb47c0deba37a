//! Minimal dense linear algebra and stable softmax machinery, plus the
//! finite-difference gradient checker used to verify every analytic
//! gradient in the crate.
//!
//! Everything is `f64`, row-major, and deliberately loop-based: the
//! matrices involved are desk-scale and transparency beats BLAS here.

use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
///
/// Public constructors reject non-finite entries so NaN/Inf cannot enter
/// downstream arithmetic unnoticed.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix construction".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::invalid("ragged rows in matrix construction"));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Copy a contiguous range of rows into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        debug_assert!(start <= end && end <= self.rows);
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// `self * other`, plain triple loop.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::invalid(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs = &other.data[k * other.cols..(k + 1) * other.cols];
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(lhs) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self^T * other`; used for weight gradients without materializing
    /// the transpose.
    pub fn transpose_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::invalid(format!(
                "transpose_matmul shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let lhs = &other.data[i * other.cols..(i + 1) * other.cols];
                let dst = &mut out.data[k * other.cols..(k + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(lhs) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`; used for input gradients.
    pub fn matmul_transpose(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::invalid(format!(
                "matmul_transpose shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let lhs = &self.data[i * self.cols..(i + 1) * self.cols];
            for j in 0..other.rows {
                let rhs = &other.data[j * other.cols..(j + 1) * other.cols];
                let mut acc = 0.0;
                for (&a, &b) in lhs.iter().zip(rhs) {
                    acc += a * b;
                }
                out.data[i * other.rows + j] = acc;
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.rows, other.rows);
        debug_assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// Column sums as a vector; the bias-gradient reduction.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (acc, &v) in out.iter_mut().zip(self.row(r)) {
                *acc += v;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn check_vector(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::invalid("empty input vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("softmax input".into()));
    }
    Ok(())
}

/// Stable softmax via max-subtraction. Output is nonnegative and sums to
/// one; adding a constant to every input leaves the result unchanged.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_vector(v)?;
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    Ok(out)
}

/// Entrywise log of [`softmax`], computed directly so large inputs never
/// overflow: `v - max - ln(sum(exp(v - max)))`.
pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_vector(v)?;
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    Ok(v.iter().map(|&x| x - max - log_sum).collect())
}

/// Pull an upstream gradient on softmax outputs back to the logits.
///
/// With `p = softmax(z)` and `g = dL/dp`, returns
/// `dL/dz_k = p_k * (g_k - sum_j g_j p_j)`.
pub fn softmax_backprop(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    debug_assert_eq!(probs.len(), grad_probs.len());
    let dot: f64 = probs.iter().zip(grad_probs).map(|(&p, &g)| p * g).sum();
    probs
        .iter()
        .zip(grad_probs)
        .map(|(&p, &g)| p * (g - dot))
        .collect()
}

/// Index of the largest entry, ties broken toward the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Central-difference gradient check: maximum over coordinates of
/// `|cd_i - analytic_i| / max(1, |analytic_i|)`.
///
/// `fn` must be evaluable at `params +- step` in each coordinate; any
/// non-finite function value aborts the check.
pub fn grad_check<F>(mut f: F, params: &[f64], analytic_grad: &[f64], step: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check step must be > 0"));
    }
    if params.len() != analytic_grad.len() {
        return Err(Error::invalid(format!(
            "grad_check length mismatch: {} params vs {} gradient entries",
            params.len(),
            analytic_grad.len()
        )));
    }
    let mut work = params.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..work.len() {
        let orig = work[i];
        work[i] = orig + step;
        let plus = f(&work);
        work[i] = orig - step;
        let minus = f(&work);
        work[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check function value at coordinate {i}"
            )));
        }
        let cd = (plus - minus) / (2.0 * step);
        let a = analytic_grad[i];
        let err = (cd - a).abs() / f64::max(1.0, a.abs());
        if err > max_err {
            max_err = err;
        }
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_large_inputs_do_not_overflow() {
        let p = softmax(&[1000.0, 1000.0, 1000.0]).unwrap();
        for x in &p {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_of_log_counts() {
        // exp([ln 1, ln 2, ln 3]) normalizes to [1/6, 2/6, 3/6].
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        assert!((p[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((p[1] - 2.0 / 6.0).abs() < 1e-12);
        assert!((p[2] - 3.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[1.0, f64::NAN]).is_err());
        assert!(softmax(&[1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..8);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c: f64 = rng.random_range(-100.0..100.0);
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let a = softmax(&v).unwrap();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        assert_eq!(
            log_softmax(&[0.0, 0.0]).unwrap(),
            vec![-(2f64.ln()), -(2f64.ln())]
        );
        let p = log_softmax(&[5.0, 5.0, 5.0, 5.0]).unwrap();
        for x in &p {
            assert!((x + 4f64.ln()).abs() < 1e-12);
        }
        // Hand evaluation: [-ln(1+e^-1), -ln(1+e)].
        let p = log_softmax(&[1.0, 0.0]).unwrap();
        assert!((p[0] + (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((p[1] + (1.0 + 1f64.exp()).ln()).abs() < 1e-12);
        assert!((p[0] + 0.3133).abs() < 1e-4);
        assert!((p[1] + 1.3133).abs() < 1e-4);
    }

    #[test]
    fn exp_log_softmax_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let n = rng.random_range(1..10);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-30.0..30.0)).collect();
            let ls = log_softmax(&v).unwrap();
            assert!(ls.iter().all(|&x| x <= 1e-15));
            let total: f64 = ls.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_quadratic() {
        let err = grad_check(|p| p[0] * p[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn grad_check_softmax_cross_entropy() {
        // Cross-entropy of softmax at fixed random logits; analytic
        // gradient is softmax - onehot.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = 2usize;
        let mut analytic = softmax(&logits).unwrap();
        analytic[target] -= 1.0;
        let err = grad_check(
            |z| -log_softmax(z).unwrap()[target],
            &logits,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target = 1usize;
        let mut wrong = softmax(&logits).unwrap();
        wrong[target] -= 1.0;
        for g in &mut wrong {
            *g *= 2.0;
        }
        let err = grad_check(
            |z| -log_softmax(z).unwrap()[target],
            &logits,
            &wrong,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.2, "doubled gradient must be flagged, err = {err}");
        assert!(err <= 1.0 + 1e-6);
    }

    #[test]
    fn grad_check_rejects_non_finite_function() {
        let res = grad_check(|_| f64::NAN, &[1.0], &[0.0], 1e-5);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_backprop_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.random_range(2..7);
            let z: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = softmax(&z).unwrap();
            let analytic = softmax_backprop(&p, &g);
            let g2 = g.clone();
            let err = grad_check(
                move |zz| {
                    let pp = softmax(zz).unwrap();
                    pp.iter().zip(&g2).map(|(&p, &w)| p * w).sum()
                },
                &z,
                &analytic,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-6, "err = {err}");
        }
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 1.0, 0.5]), 0);
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }

    #[test]
    fn matrix_shape_and_validation() {
        assert!(Matrix::new(2, 2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        let a = Matrix::new(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Matrix::new(3, 1, vec![1., 0., -1.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[-2.0, -2.0]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn transpose_products_agree_with_explicit_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Matrix::new(
            3,
            4,
            (0..12).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let b = Matrix::new(
            3,
            2,
            (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        // a^T b via transpose_matmul vs building the transpose by hand.
        let mut at = Matrix::zeros(4, 3);
        for i in 0..3 {
            for j in 0..4 {
                at.set(j, i, a.get(i, j));
            }
        }
        let want = at.matmul(&b).unwrap();
        let got = a.transpose_matmul(&b).unwrap();
        for (x, y) in got.data().iter().zip(want.data()) {
            assert!((x - y).abs() < 1e-14);
        }
        // b a^T via matmul_transpose: shapes 3x2 * 4x2^T is invalid; use b^T path instead.
        let got2 = b.matmul_transpose(&b).unwrap();
        assert_eq!(got2.rows(), 3);
        assert_eq!(got2.cols(), 3);
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..2).map(|k| b.get(i, k) * b.get(j, k)).sum();
                assert!((got2.get(i, j) - want).abs() < 1e-14);
            }
        }
    }
}
