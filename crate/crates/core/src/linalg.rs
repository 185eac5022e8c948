//! Small dense symmetric positive-definite helpers.

use crate::error::{DiceError, Result};

// Pivots below this fraction of the largest diagonal entry are treated as a
// failed factorization (rank-deficient covariance).
const RELATIVE_PIVOT_TOL: f64 = 1e-10;

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
}

pub fn cholesky(a: &[f64], dim: usize) -> Result<Cholesky> {
    debug_assert_eq!(a.len(), dim * dim);
    let max_diag = (0..dim)
        .map(|i| a[i * dim + i].abs())
        .fold(0.0f64, f64::max);
    let tol = RELATIVE_PIVOT_TOL * max_diag.max(f64::MIN_POSITIVE);
    let mut l = vec![0.0f64; dim * dim];
    for j in 0..dim {
        let mut d = a[j * dim + j];
        for k in 0..j {
            d -= l[j * dim + k] * l[j * dim + k];
        }
        if !(d > tol) || !d.is_finite() {
            return Err(DiceError::Numerical(format!(
                "covariance is not positive definite (pivot {d:e} at index {j})"
            )));
        }
        let d = d.sqrt();
        l[j * dim + j] = d;
        for i in (j + 1)..dim {
            let mut s = a[i * dim + j];
            for k in 0..j {
                s -= l[i * dim + k] * l[j * dim + k];
            }
            l[i * dim + j] = s / d;
        }
    }
    Ok(Cholesky { dim, lower: l })
}

impl Cholesky {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Solves `L y = b` in place.
    fn forward_subst(&self, b: &mut [f64]) {
        let n = self.dim;
        for i in 0..n {
            let mut s = b[i];
            for k in 0..i {
                s -= self.lower[i * n + k] * b[k];
            }
            b[i] = s / self.lower[i * n + i];
        }
    }

    /// Solves `Lᵀ x = y` in place.
    fn backward_subst(&self, y: &mut [f64]) {
        let n = self.dim;
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= self.lower[k * n + i] * y[k];
            }
            y[i] = s / self.lower[i * n + i];
        }
    }

    /// `dᵀ A⁻¹ d = ‖L⁻¹ d‖²`, non-negative by construction.
    pub fn whitened_norm_sq(&self, d: &[f64]) -> f64 {
        let mut y = d.to_vec();
        self.forward_subst(&mut y);
        y.iter().map(|v| v * v).sum()
    }

    /// `A⁻¹`, row-major.
    pub fn inverse(&self) -> Vec<f64> {
        let n = self.dim;
        let mut inv = vec![0.0f64; n * n];
        let mut col = vec![0.0f64; n];
        for j in 0..n {
            col.iter_mut().for_each(|v| *v = 0.0);
            col[j] = 1.0;
            self.forward_subst(&mut col);
            self.backward_subst(&mut col);
            for i in 0..n {
                inv[i * n + j] = col[i];
            }
        }
        inv
    }
}
