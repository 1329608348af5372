//! Squared-exponential (RBF) kernel with per-dimension lengthscales.

use nalgebra::{Cholesky, DMatrix, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Relative diagonal jitter added before factorizing a Gram matrix.
pub const BASE_JITTER: f64 = 1e-6;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RbfKernel {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
}

impl RbfKernel {
    pub fn new(lengthscales: Vec<f64>, signal_variance: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(Error::Contract("kernel needs at least one lengthscale".into()));
        }
        if lengthscales.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::Contract(format!(
                "lengthscales must be positive and finite, got {lengthscales:?}"
            )));
        }
        if !(signal_variance.is_finite() && signal_variance > 0.0) {
            return Err(Error::Contract(format!(
                "signal variance must be positive and finite, got {signal_variance}"
            )));
        }
        Ok(Self { lengthscales, signal_variance })
    }

    pub fn isotropic(dim: usize, lengthscale: f64, signal_variance: f64) -> Result<Self> {
        Self::new(vec![lengthscale; dim], signal_variance)
    }

    pub fn input_dim(&self) -> usize {
        self.lengthscales.len()
    }

    /// `k(x, x2) = σ_f² exp(-½ Σ ((x_j - x2_j) / l_j)²)`.
    pub fn eval(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        check_dim(self.input_dim(), x.len())?;
        check_dim(self.input_dim(), x2.len())?;
        Ok(self.eval_unchecked(x, x2))
    }

    #[inline]
    pub(crate) fn eval_unchecked(&self, x: &[f64], x2: &[f64]) -> f64 {
        self.signal_variance * (-0.5 * self.scaled_sqdist(x, x2)).exp()
    }

    #[inline]
    pub(crate) fn scaled_sqdist(&self, x: &[f64], x2: &[f64]) -> f64 {
        x.iter()
            .zip(x2)
            .zip(&self.lengthscales)
            .map(|((a, b), l)| {
                let r = (a - b) / l;
                r * r
            })
            .sum()
    }

    /// Cross-covariance between the rows of `x` (n×d) and `x2` (m×d).
    pub fn gram(&self, x: &DMatrix<f64>, x2: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.input_dim(), x.ncols())?;
        check_dim(self.input_dim(), x2.ncols())?;
        let rows_a = rows(x);
        let rows_b = rows(x2);
        Ok(DMatrix::from_fn(x.nrows(), x2.nrows(), |i, j| {
            self.eval_unchecked(&rows_a[i], &rows_b[j])
        }))
    }

    /// Kernel vector `k(x, Z_j)` for every row of `z`.
    pub fn cross(&self, x: &[f64], z: &DMatrix<f64>) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        check_dim(self.input_dim(), z.ncols())?;
        Ok(rows(z).iter().map(|r| self.eval_unchecked(x, r)).collect())
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

/// A Gram matrix together with the jitter that made it factorizable.
#[derive(Debug, Clone)]
pub struct FactoredGram {
    /// `K + jitter·I`, the matrix that was actually factorized.
    pub matrix: DMatrix<f64>,
    pub cholesky: Cholesky<f64, Dyn>,
    /// Relative jitter (multiplies the signal variance).
    pub jitter: f64,
}

impl FactoredGram {
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.cholesky.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.cholesky.inverse()
    }

    pub fn ln_det(&self) -> f64 {
        2.0 * self.cholesky.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Factorize `gram(z, z)` with the escalating jitter policy: start at
/// `1e-6·σ_f²` on the diagonal and multiply by ten up to `1e-2·σ_f²`.
pub fn factor_gram(kernel: &RbfKernel, z: &DMatrix<f64>) -> Result<FactoredGram> {
    let k = kernel.gram(z, z)?;
    let mut jitter = BASE_JITTER;
    while jitter <= MAX_JITTER * (1.0 + 1e-12) {
        let mut m = k.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter * kernel.signal_variance;
        }
        if let Some(cholesky) = m.clone().cholesky() {
            return Ok(FactoredGram { matrix: m, cholesky, jitter });
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!(
        "Cholesky of the {n}×{n} inducing Gram matrix failed with jitter up to {MAX_JITTER}",
        n = z.nrows()
    )))
}

/// Symmetric positive-definite factorization of an arbitrary covariance with
/// the same escalating jitter, scaled by the mean diagonal.
pub(crate) fn jittered_cholesky(m: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let sym = (m + m.transpose()) * 0.5;
    let scale = (sym.diagonal().iter().sum::<f64>() / n.max(1) as f64).max(1e-300);
    if let Some(c) = sym.clone().cholesky() {
        return Ok(c);
    }
    let mut jitter = BASE_JITTER;
    while jitter <= MAX_JITTER * (1.0 + 1e-12) {
        let mut s = sym.clone();
        for i in 0..n {
            s[(i, i)] += jitter * scale;
        }
        if let Some(c) = s.cholesky() {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(Error::Numerical(format!("Cholesky of a {n}×{n} covariance failed")))
}
