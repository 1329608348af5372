//! Inducing inputs and the variational distribution `q(U) = N(μ_u, Σ_u)`.
//!
//! Each output dimension is an independent GP sharing the inducing inputs
//! and the kernel; it has its own mean column and its own covariance, kept as
//! a lower-triangular factor `F` with `Σ_u = F Fᵀ`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::kernel::{factor_gram, jittered_cholesky, RbfKernel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InducingSet {
    /// L×d inducing inputs.
    pub inputs: DMatrix<f64>,
    /// L×p variational means, one column per output.
    pub mean: DMatrix<f64>,
    /// Lower-triangular L×L factors of the per-output covariances.
    pub cov_factors: Vec<DMatrix<f64>>,
}

impl InducingSet {
    pub fn new(
        inputs: DMatrix<f64>,
        mean: DMatrix<f64>,
        cov_factors: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let l = inputs.nrows();
        if l == 0 {
            return Err(Error::Contract("need at least one inducing input".into()));
        }
        check_dim(l, mean.nrows())?;
        check_dim(mean.ncols(), cov_factors.len())?;
        for f in &cov_factors {
            if f.shape() != (l, l) {
                return Err(Error::Contract(format!(
                    "covariance factor has shape {:?}, expected ({l}, {l})",
                    f.shape()
                )));
            }
        }
        let cov_factors = cov_factors.into_iter().map(|f| f.lower_triangle()).collect();
        Ok(Self { inputs, mean, cov_factors })
    }

    /// Build from explicit covariances. Each must be symmetric PSD up to
    /// `-1e-8` eigenvalue slack; semidefinite ones are factorized with jitter.
    pub fn from_covariances(
        inputs: DMatrix<f64>,
        mean: DMatrix<f64>,
        covariances: &[DMatrix<f64>],
    ) -> Result<Self> {
        let mut factors = Vec::with_capacity(covariances.len());
        for c in covariances {
            let sym = (c + c.transpose()) * 0.5;
            let min_eig = sym.clone().symmetric_eigenvalues().min();
            if min_eig < -1e-8 {
                return Err(Error::Contract(format!(
                    "variational covariance is not PSD (min eigenvalue {min_eig})"
                )));
            }
            if sym.iter().all(|v| *v == 0.0) {
                factors.push(DMatrix::zeros(sym.nrows(), sym.ncols()));
            } else {
                factors.push(jittered_cholesky(&sym)?.l());
            }
        }
        Self::new(inputs, mean, factors)
    }

    /// The prior `q(U) = p(U) = N(0, K)` at the given inputs.
    pub fn prior(kernel: &RbfKernel, inputs: DMatrix<f64>, output_dim: usize) -> Result<Self> {
        let gram = factor_gram(kernel, &inputs)?;
        let l = gram.cholesky.l();
        let mean = DMatrix::zeros(inputs.nrows(), output_dim);
        Self::new(inputs, mean, vec![l; output_dim])
    }

    pub fn num_inducing(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.mean.ncols()
    }

    pub fn covariance(&self, output: usize) -> DMatrix<f64> {
        let f = &self.cov_factors[output];
        f * f.transpose()
    }

    /// `U = μ_u + F ζ`, with `zeta` an L×p matrix of standard normals.
    pub fn outputs_from_noise(&self, zeta: &DMatrix<f64>) -> DMatrix<f64> {
        let mut u = self.mean.clone();
        for (o, f) in self.cov_factors.iter().enumerate() {
            let col = f * zeta.column(o);
            for (r, v) in col.iter().enumerate() {
                u[(r, o)] += v;
            }
        }
        u
    }
}

/// `KL(q(U) ‖ p(U))` summed over output dimensions, with `p(U) = N(0, K)` and
/// `K` the jittered inducing Gram matrix.
pub fn kl_divergence(inducing: &InducingSet, kernel: &RbfKernel) -> Result<f64> {
    check_dim(kernel.input_dim(), inducing.input_dim())?;
    let gram = factor_gram(kernel, &inducing.inputs)?;
    let l = inducing.num_inducing() as f64;
    let ln_det_k = gram.ln_det();
    let mut total = 0.0;
    for o in 0..inducing.output_dim() {
        let f = &inducing.cov_factors[o];
        let mu = inducing.mean.column(o).into_owned();
        // tr(K⁻¹ F Fᵀ) = ‖L⁻¹ F‖_F²
        let lf = gram
            .cholesky
            .l_dirty()
            .solve_lower_triangular(f)
            .ok_or_else(|| Error::Numerical("triangular solve failed".into()))?;
        let trace = lf.norm_squared();
        let alpha = gram.cholesky.solve(&mu);
        let quad = mu.dot(&alpha);
        let ln_det_s: f64 = f.diagonal().iter().map(|v| (v * v).ln()).sum();
        total += 0.5 * (trace + quad - l + ln_det_k - ln_det_s);
    }
    Ok(total)
}

/// Analytic marginal moments of the sparse posterior at the rows of `points`:
/// per output, the mean vector and the full covariance matrix.
pub fn posterior_moments(
    inducing: &InducingSet,
    kernel: &RbfKernel,
    points: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    let gram = factor_gram(kernel, &inducing.inputs)?;
    let kxz = kernel.gram(points, &inducing.inputs)?;
    let kxx = kernel.gram(points, points)?;
    // A = K⁻¹ K_zx
    let a = gram.solve(&kxz.transpose());
    let mean = a.transpose() * &inducing.mean;
    let base = &kxx - &kxz * &a;
    let covs = (0..inducing.output_dim())
        .map(|o| {
            let s = inducing.covariance(o);
            &base + a.transpose() * s * &a
        })
        .collect();
    Ok((mean, covs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn spread_inputs() -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[-2.0, -2.0, -2.0, 2.0, 2.0, -2.0, 2.0, 2.0])
    }

    #[test]
    fn kl_of_prior_is_zero() {
        let k = RbfKernel::isotropic(2, 1.0, 1.5).unwrap();
        let z = spread_inputs();
        let q = InducingSet::prior(&k, z.clone(), 2).unwrap();
        assert!(kl_divergence(&q, &k).unwrap().abs() < 1e-6);

        // Σ_u given as the raw (unjittered) Gram matrix.
        let gram = k.gram(&z, &z).unwrap();
        let q = InducingSet::from_covariances(z, DMatrix::zeros(4, 2), &[gram.clone(), gram]).unwrap();
        assert!(kl_divergence(&q, &k).unwrap().abs() < 1e-6);
    }

    #[test]
    fn kl_is_positive_after_mean_shift() {
        let k = RbfKernel::isotropic(2, 1.0, 1.0).unwrap();
        let mut q = InducingSet::prior(&k, spread_inputs(), 1).unwrap();
        q.mean[(2, 0)] = 0.01;
        assert!(kl_divergence(&q, &k).unwrap() > 0.0);
    }

    #[test]
    fn scalar_kl_matches_hand_value() {
        // ½(μ² + σ²/k − 1 − ln(σ²/k)) = ½(1 + 1 − 1 − 0) per output.
        let k = RbfKernel::isotropic(1, 1.0, 1.0).unwrap();
        let z = DMatrix::from_element(1, 1, 0.0);
        let one = DMatrix::from_element(1, 1, 1.0);
        let q = InducingSet::new(z, DMatrix::from_element(1, 2, 1.0), vec![one.clone(), one]).unwrap();
        assert_relative_eq!(kl_divergence(&q, &k).unwrap(), 1.0, epsilon = 1e-5);
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let z = DMatrix::from_element(2, 1, 0.0);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(InducingSet::from_covariances(z, DMatrix::zeros(2, 1), &[bad]).is_err());
    }

    #[test]
    fn empty_inducing_set_rejected() {
        let z = DMatrix::<f64>::zeros(0, 1);
        assert!(InducingSet::new(z, DMatrix::zeros(0, 1), vec![DMatrix::zeros(0, 0)]).is_err());
    }

    #[test]
    fn moments_at_inducing_inputs_recover_q() {
        let k = RbfKernel::isotropic(2, 1.0, 1.0).unwrap();
        let z = spread_inputs();
        let mean = DMatrix::from_row_slice(4, 1, &[0.5, -1.0, 0.25, 2.0]);
        let cov = DMatrix::from_diagonal_element(4, 4, 0.04);
        let q = InducingSet::from_covariances(z.clone(), mean.clone(), &[cov.clone()]).unwrap();
        let (m, c) = posterior_moments(&q, &k, &z).unwrap();
        assert!((m - mean).amax() < 1e-4);
        assert!((&c[0] - cov).amax() < 1e-4);
    }
}
