//! Decoupled (pathwise) sampling of whole vector fields from the sparse
//! posterior.
//!
//! A draw is a random-feature prior sample plus a kernel update that pins it
//! to a draw of the inducing outputs:
//!
//! `g(x) = Σ_i w_i φ_i(x) + Σ_j v_j k(x, Z_j)`, `v = K⁻¹(U − Φw)`.
//!
//! Once built, a [`SampledDynamics`] is a fixed deterministic function and can
//! be shared read-only across threads.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::fourier::{FeatureNoise, FourierFeatureSet};
use crate::inducing::InducingSet;
use crate::kernel::{factor_gram, FactoredGram, RbfKernel};

/// All randomness consumed by one function draw.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawNoise {
    pub features: FeatureNoise,
    /// L×p standard normals for `U = μ_u + F ζ`.
    pub inducing: DMatrix<f64>,
}

impl DrawNoise {
    pub fn sample<R: Rng + ?Sized>(
        n_features: usize,
        num_inducing: usize,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let features = FeatureNoise::sample(n_features, input_dim, output_dim, rng);
        let inducing = DMatrix::from_fn(num_inducing, output_dim, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        Self { features, inducing }
    }
}

#[derive(Debug, Clone)]
pub struct SampledDynamics {
    features: FourierFeatureSet,
    /// L×p row-major update weights `v`.
    update_weights: Vec<f64>,
    /// L×d row-major inducing inputs.
    inducing_inputs: Vec<f64>,
    kernel: RbfKernel,
    inv_lengthscales: Vec<f64>,
}

impl SampledDynamics {
    pub fn input_dim(&self) -> usize {
        self.kernel.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.features.output_dim()
    }

    pub fn features(&self) -> &FourierFeatureSet {
        &self.features
    }

    pub fn kernel(&self) -> &RbfKernel {
        &self.kernel
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing_inputs.len() / self.input_dim()
    }

    pub fn update_weight(&self, j: usize, o: usize) -> f64 {
        self.update_weights[j * self.output_dim() + o]
    }

    fn inducing_input(&self, j: usize) -> &[f64] {
        let d = self.input_dim();
        &self.inducing_inputs[j * d..(j + 1) * d]
    }

    /// Evaluates the sampled field into `out` without checks or allocation.
    #[inline]
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.features.accumulate_prior(x, out);
        self.accumulate_update(x, out);
    }

    #[inline]
    fn accumulate_update(&self, x: &[f64], out: &mut [f64]) {
        let p = self.output_dim();
        for j in 0..self.num_inducing() {
            let z = self.inducing_input(j);
            let mut r = 0.0;
            for ((a, b), il) in x.iter().zip(z).zip(&self.inv_lengthscales) {
                let t = (a - b) * il;
                r += t * t;
            }
            let k = self.kernel.signal_variance * (-0.5 * r).exp();
            let v = &self.update_weights[j * p..(j + 1) * p];
            for (o, vo) in out.iter_mut().zip(v) {
                *o += vo * k;
            }
        }
    }

    /// The update term `Σ_j v_j k(x, Z_j)` alone.
    pub fn update_term(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let mut out = vec![0.0; self.output_dim()];
        self.accumulate_update(x, &mut out);
        Ok(out)
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim(), x.len())?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite dynamics input {x:?}")));
        }
        let mut out = vec![0.0; self.output_dim()];
        self.eval_into(x, &mut out);
        Ok(out)
    }
}

/// Caches the factorized inducing Gram matrix so that many functions can be
/// drawn from the same posterior.
#[derive(Debug, Clone)]
pub struct PosteriorSampler<'a> {
    inducing: &'a InducingSet,
    kernel: &'a RbfKernel,
    gram: FactoredGram,
}

impl<'a> PosteriorSampler<'a> {
    pub fn new(inducing: &'a InducingSet, kernel: &'a RbfKernel) -> Result<Self> {
        check_dim(kernel.input_dim(), inducing.input_dim())?;
        let gram = factor_gram(kernel, &inducing.inputs)?;
        Ok(Self { inducing, kernel, gram })
    }

    pub fn gram(&self) -> &FactoredGram {
        &self.gram
    }

    pub fn draw<R: Rng + ?Sized>(&self, n_features: usize, rng: &mut R) -> Result<SampledDynamics> {
        if n_features == 0 {
            return Err(Error::Contract("need at least one Fourier feature".into()));
        }
        let noise = DrawNoise::sample(
            n_features,
            self.inducing.num_inducing(),
            self.inducing.input_dim(),
            self.inducing.output_dim(),
            rng,
        );
        self.build(&noise)
    }

    /// Deterministic construction from explicit noise.
    pub fn build(&self, noise: &DrawNoise) -> Result<SampledDynamics> {
        let features = FourierFeatureSet::from_noise(self.kernel, &noise.features)?;
        let u = self.inducing.outputs_from_noise(&noise.inducing);
        let phi = features.feature_matrix(&self.inducing.inputs)?;
        let w = DMatrix::from_row_slice(
            noise.features.n_features,
            noise.features.output_dim,
            &noise.features.weights,
        );
        let residual = u - phi * w;
        let v = self.gram.solve(&residual);
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical("non-finite update weights".into()));
        }
        let update_weights = (0..v.nrows())
            .flat_map(|j| v.row(j).iter().copied().collect::<Vec<_>>())
            .collect();
        let inducing_inputs = (0..self.inducing.num_inducing())
            .flat_map(|j| self.inducing.inputs.row(j).iter().copied().collect::<Vec<_>>())
            .collect();
        Ok(SampledDynamics {
            features,
            update_weights,
            inducing_inputs,
            kernel: self.kernel.clone(),
            inv_lengthscales: self.kernel.lengthscales.iter().map(|l| 1.0 / l).collect(),
        })
    }
}

/// Draw one consistent vector field from `q(U)` and the kernel prior.
pub fn draw_function<R: Rng + ?Sized>(
    inducing: &InducingSet,
    kernel: &RbfKernel,
    n_features: usize,
    rng: &mut R,
) -> Result<SampledDynamics> {
    PosteriorSampler::new(inducing, kernel)?.draw(n_features, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::from_seed;

    fn grid_inputs() -> DMatrix<f64> {
        let mut v = Vec::new();
        for a in [-2.0, 0.0, 2.0] {
            for b in [-2.0, 0.0, 2.0] {
                v.extend([a, b]);
            }
        }
        DMatrix::from_row_slice(9, 2, &v)
    }

    fn pinned(mean: DMatrix<f64>) -> InducingSet {
        let l = mean.nrows();
        InducingSet::new(grid_inputs(), mean, vec![DMatrix::zeros(l, l); 2]).unwrap()
    }

    #[test]
    fn evaluation_is_pure() {
        let k = RbfKernel::isotropic(2, 1.0, 1.0).unwrap();
        let q = InducingSet::prior(&k, grid_inputs(), 2).unwrap();
        let g = draw_function(&q, &k, 128, &mut from_seed(1)).unwrap();
        let a = g.evaluate(&[0.3, -0.7]).unwrap();
        let b = g.evaluate(&[0.3, -0.7]).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn non_finite_input_rejected() {
        let k = RbfKernel::isotropic(2, 1.0, 1.0).unwrap();
        let q = InducingSet::prior(&k, grid_inputs(), 2).unwrap();
        let g = draw_function(&q, &k, 8, &mut from_seed(1)).unwrap();
        assert!(g.evaluate(&[f64::NAN, 0.0]).is_err());
        assert!(g.evaluate(&[0.0]).is_err());
    }

    #[test]
    fn interpolates_pinned_inducing_outputs() {
        let k = RbfKernel::isotropic(2, 1.0, 1.0).unwrap();
        let mean = DMatrix::from_fn(9, 2, |j, o| 0.3 * j as f64 - 0.5 * o as f64);
        let q = pinned(mean.clone());
        let g = draw_function(&q, &k, 2048, &mut from_seed(5)).unwrap();
        for j in 0..9 {
            let z: Vec<f64> = grid_inputs().row(j).iter().copied().collect();
            let val = g.evaluate(&z).unwrap();
            for o in 0..2 {
                assert!((val[o] - mean[(j, o)]).abs() <= 0.05, "j={j} o={o}: {} vs {}", val[o], mean[(j, o)]);
            }
        }
    }

    #[test]
    fn zero_posterior_draws_average_to_zero() {
        let k = RbfKernel::isotropic(2, 1.0, 1.0).unwrap();
        let q = pinned(DMatrix::zeros(9, 2));
        let sampler = PosteriorSampler::new(&q, &k).unwrap();
        let mut rng = from_seed(8);
        let n = 1000;
        let x = [1.0, 1.0];
        let mean: f64 = (0..n)
            .map(|_| sampler.draw(512, &mut rng).unwrap().evaluate(&x).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        let bound = 3.0 * k.signal_variance.sqrt() / (n as f64).sqrt();
        assert!(mean.abs() < bound, "{mean} vs {bound}");
    }

    #[test]
    fn different_seeds_give_different_functions() {
        let k = RbfKernel::isotropic(2, 1.0, 1.0).unwrap();
        let q = InducingSet::prior(&k, grid_inputs(), 2).unwrap();
        let a = draw_function(&q, &k, 64, &mut from_seed(1)).unwrap();
        let b = draw_function(&q, &k, 64, &mut from_seed(2)).unwrap();
        let diff = (0..10)
            .map(|i| {
                let x = [i as f64 * 0.3 - 1.5, 0.2];
                (a.evaluate(&x).unwrap()[0] - b.evaluate(&x).unwrap()[0]).abs()
            })
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn update_term_decays_far_from_inducing_inputs() {
        let k = RbfKernel::isotropic(2, 0.5, 1.0).unwrap();
        let q = InducingSet::prior(&k, grid_inputs(), 2).unwrap();
        let g = draw_function(&q, &k, 64, &mut from_seed(3)).unwrap();
        let x = [30.0, -30.0];
        let vmax = (0..9)
            .flat_map(|j| (0..2).map(move |o| (j, o)))
            .map(|(j, o)| g.update_weight(j, o).abs())
            .fold(0.0, f64::max);
        // Nearest inducing input is (2, -2): distance² = 28² · 2.
        let dist2 = 2.0 * 28.0f64.powi(2);
        let bound = 9.0 * vmax * (-dist2 / (2.0 * 0.25)).exp();
        for u in g.update_term(&x).unwrap() {
            assert!(u.abs() <= bound.max(1e-300));
        }
    }
}
