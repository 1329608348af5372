//! Random Fourier features for the RBF kernel prior.
//!
//! A prior function draw is `f_o(x) = Σ_i w_io φ_i(x)` with
//! `φ_i(x) = sqrt(2σ_f²/S) cos(ω_iᵀx + b_i)`, `ω_i ~ N(0, diag(1/l²))`,
//! `b_i ~ U[0, 2π)` and `w_io ~ N(0, 1)`. The output dimensions share
//! frequencies and phases and have their own weights.

use std::f64::consts::TAU;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::kernel::RbfKernel;

/// The kernel-independent randomness behind a feature set. Keeping it
/// separate lets training differentiate through the lengthscales with the
/// noise held fixed.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureNoise {
    pub n_features: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    /// Standard-normal spectral draws, S×d row-major.
    pub spectral: Vec<f64>,
    pub phases: Vec<f64>,
    /// Prior weights, S×p row-major.
    pub weights: Vec<f64>,
}

impl FeatureNoise {
    pub fn sample<R: Rng + ?Sized>(
        n_features: usize,
        input_dim: usize,
        output_dim: usize,
        rng: &mut R,
    ) -> Self {
        let spectral = (0..n_features * input_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let phases = (0..n_features).map(|_| rng.gen::<f64>() * TAU).collect();
        let weights = (0..n_features * output_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self { n_features, input_dim, output_dim, spectral, phases, weights }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FourierFeatureSet {
    input_dim: usize,
    output_dim: usize,
    /// `ω_i`, S×d row-major.
    frequencies: Vec<f64>,
    phases: Vec<f64>,
    weights: Vec<f64>,
    amplitude: f64,
}

impl FourierFeatureSet {
    pub fn from_noise(kernel: &RbfKernel, noise: &FeatureNoise) -> Result<Self> {
        check_dim(kernel.input_dim(), noise.input_dim)?;
        if noise.n_features == 0 {
            return Err(Error::Contract("need at least one Fourier feature".into()));
        }
        let d = noise.input_dim;
        let frequencies = noise
            .spectral
            .chunks(d)
            .flat_map(|eps| eps.iter().zip(&kernel.lengthscales).map(|(e, l)| e / l))
            .collect();
        Ok(Self {
            input_dim: d,
            output_dim: noise.output_dim,
            frequencies,
            phases: noise.phases.clone(),
            weights: noise.weights.clone(),
            amplitude: (2.0 * kernel.signal_variance / noise.n_features as f64).sqrt(),
        })
    }

    pub fn n_features(&self) -> usize {
        self.phases.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn amplitude(&self) -> f64 {
        self.amplitude
    }

    pub fn frequency(&self, i: usize) -> &[f64] {
        &self.frequencies[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn phases(&self) -> &[f64] {
        &self.phases
    }

    pub fn weight(&self, i: usize, o: usize) -> f64 {
        self.weights[i * self.output_dim + o]
    }

    /// Feature vector `φ(x)` of length S.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_features())
            .map(|i| self.amplitude * (dot(self.frequency(i), x) + self.phases[i]).cos())
            .collect()
    }

    /// Feature matrix with one row per row of `points`.
    pub fn feature_matrix(&self, points: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.input_dim, points.ncols())?;
        let mut m = DMatrix::zeros(points.nrows(), self.n_features());
        for r in 0..points.nrows() {
            let x: Vec<f64> = points.row(r).iter().copied().collect();
            for (c, v) in self.features(&x).into_iter().enumerate() {
                m[(r, c)] = v;
            }
        }
        Ok(m)
    }

    /// Adds the prior draw `Σ_i w_io φ_i(x)` to `out`.
    #[inline]
    pub(crate) fn accumulate_prior(&self, x: &[f64], out: &mut [f64]) {
        let p = self.output_dim;
        for i in 0..self.n_features() {
            let c = self.amplitude * (dot(self.frequency(i), x) + self.phases[i]).cos();
            let w = &self.weights[i * p..(i + 1) * p];
            for (o, wo) in out.iter_mut().zip(w) {
                *o += wo * c;
            }
        }
    }

    /// Prior function values at `x`, one per output dimension.
    pub fn prior(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.input_dim, x.len())?;
        let mut out = vec![0.0; self.output_dim];
        self.accumulate_prior(x, &mut out);
        Ok(out)
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draw `n_features` random Fourier features of `kernel`, with prior weights
/// for `output_dim` independent outputs.
pub fn sample_fourier_features<R: Rng + ?Sized>(
    kernel: &RbfKernel,
    n_features: usize,
    output_dim: usize,
    rng: &mut R,
) -> Result<FourierFeatureSet> {
    if n_features == 0 {
        return Err(Error::Contract("need at least one Fourier feature".into()));
    }
    let noise = FeatureNoise::sample(n_features, kernel.input_dim(), output_dim, rng);
    FourierFeatureSet::from_noise(kernel, &noise)
}
