//! Information scores for candidate initial states and the sampled safety
//! probability.

use std::f64::consts::{E, PI};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::integrator::{IntegratorConfig, Trajectory};

/// Axis-aligned state constraint `lower ≤ x ≤ upper`, bounds inclusive.
/// Infinite entries leave a side unconstrained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SafetyBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl SafetyBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(Error::Contract("safety bounds need at least one dimension".into()));
        }
        for (a, b) in lower.iter().zip(&upper) {
            if a.is_nan() || b.is_nan() || a >= b {
                return Err(Error::Contract(format!("invalid safety interval [{a}, {b}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unbounded(d: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; d], upper: vec![f64::INFINITY; d] }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// NaN never counts as inside.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.lower.iter().zip(&self.upper)).all(|(v, (a, b))| *a <= *v && *v <= *b)
    }

    /// True when the start and every reported state lie inside the box.
    pub fn admits(&self, trajectory: &Trajectory) -> bool {
        !trajectory.diverged
            && self.contains(&trajectory.x0)
            && (0..trajectory.len()).all(|i| self.contains(trajectory.state(i)))
    }

    /// Shrink every finite interval symmetrically about its midpoint.
    pub fn shrunk(&self, factor: f64) -> Self {
        let (lower, upper) = self
            .lower
            .iter()
            .zip(&self.upper)
            .map(|(a, b)| {
                if a.is_finite() && b.is_finite() {
                    let (c, h) = (0.5 * (a + b), 0.5 * (b - a) * factor);
                    (c - h, c + h)
                } else {
                    (*a, *b)
                }
            })
            .unzip();
        Self { lower, upper }
    }
}

/// How predictive trajectories are sampled when scoring a candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Number of dynamics draws `K`.
    pub draws: usize,
    pub include_x0_noise: bool,
    pub seed: u64,
    pub n_features: usize,
    pub integrator: IntegratorConfig,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            draws: 32,
            include_x0_noise: true,
            seed: 0,
            n_features: 256,
            integrator: IntegratorConfig::dopri(1e-4, 1e-6),
        }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.draws == 0 || self.n_features == 0 {
            return Err(Error::Config("sampling needs at least one draw and one feature".into()));
        }
        self.integrator.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scalarization {
    /// Total variance.
    #[default]
    Trace,
    /// Log-determinant with a small diagonal jitter.
    LogDet,
}

const LOGDET_JITTER: f64 = 1e-9;

fn log_mean_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + (sum / values.len() as f64).ln()
}

/// `−(1/M) Σ_m log((1/K) Σ_l exp(L[m, l]))` for a matrix of log densities of
/// observation set `m` under mixture component `l`.
pub fn mixture_entropy(log_density: &DMatrix<f64>) -> f64 {
    let m = log_density.nrows();
    let t = log_density.transpose();
    -t.column_iter().map(|c| log_mean_exp(c.as_slice())).sum::<f64>() / m as f64
}

/// `Σ_entries log N(y | x, σ²)`, with σ per state dimension.
pub fn gaussian_log_density(y: &[f64], x: &[f64], sigma: &[f64]) -> f64 {
    let norm: f64 = sigma.iter().map(|s| -s.ln() - 0.5 * (2.0 * PI).ln()).sum::<f64>() * (y.len() / sigma.len()) as f64;
    let inv: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
    norm - 0.5 * weighted_sqdist(y, x, &inv)
}

#[inline]
fn weighted_sqdist(y: &[f64], x: &[f64], inv_sigma: &[f64]) -> f64 {
    let d = inv_sigma.len();
    let mut acc = 0.0;
    for (yc, xc) in y.chunks_exact(d).zip(x.chunks_exact(d)) {
        for k in 0..d {
            let r = (yc[k] - xc[k]) * inv_sigma[k];
            acc += r * r;
        }
    }
    acc
}

fn check_ensemble(trajectories: &[Trajectory], min: usize) -> Result<(usize, usize)> {
    if trajectories.len() < min {
        return Err(Error::Contract(format!("need at least {min} trajectory samples, got {}", trajectories.len())));
    }
    let (n, d) = (trajectories[0].len(), trajectories[0].dim());
    for tr in trajectories {
        if tr.len() != n || tr.dim() != d {
            return Err(Error::Contract("trajectory samples are not aligned on one schedule".into()));
        }
        if tr.diverged {
            return Err(Error::Contract("diverged trajectory in acquisition ensemble".into()));
        }
    }
    Ok((n, d))
}

/// Monte-Carlo marginal entropy of the observation sequence:
/// `−(1/K) Σ_m log[(1/K) Σ_l N(y^m | x^l, σ²I)]`.
pub fn entropy_acquisition(trajectories: &[Trajectory], observations: &[Vec<f64>], sigma: &[f64]) -> Result<f64> {
    let (n, d) = check_ensemble(trajectories, 2)?;
    check_dim(d, sigma.len())?;
    check_dim(trajectories.len(), observations.len())?;
    if observations.iter().any(|y| y.len() != n * d) {
        return Err(Error::Contract("observation sample does not match the trajectory shape".into()));
    }
    let k = trajectories.len();
    let norm = n as f64 * sigma.iter().map(|s| -s.ln() - 0.5 * (2.0 * PI).ln()).sum::<f64>();
    let inv: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
    let mut row = vec![0.0; k];
    let mut total = 0.0;
    for y in observations {
        for (r, tr) in row.iter_mut().zip(trajectories) {
            *r = -0.5 * weighted_sqdist(y, &tr.states, &inv);
        }
        total += norm + log_mean_exp(&row);
    }
    Ok(-total / k as f64)
}

/// Scalarized empirical (unbiased) covariance of the flattened states.
pub fn covariance_acquisition(trajectories: &[Trajectory], scalarization: Scalarization) -> Result<f64> {
    let (n, d) = check_ensemble(trajectories, 2)?;
    let k = trajectories.len();
    let dim = n * d;
    let samples = DMatrix::from_fn(dim, k, |i, l| trajectories[l].states[i]);
    let mean = samples.column_mean();
    let centered = DMatrix::from_fn(dim, k, |i, l| samples[(i, l)] - mean[i]);
    let denom = (k - 1) as f64;
    Ok(match scalarization {
        Scalarization::Trace => centered.iter().map(|v| v * v).sum::<f64>() / denom,
        Scalarization::LogDet => {
            let mut cov = &centered * centered.transpose() / denom;
            for i in 0..dim {
                cov[(i, i)] += LOGDET_JITTER;
            }
            match cov.cholesky() {
                Some(c) => 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>(),
                None => return Err(Error::Numerical("empirical covariance not positive definite".into())),
            }
        }
    })
}

/// Fraction of sampled trajectories that stay inside `bounds` at the start
/// and at every reported time; diverged samples count as violations.
pub fn safety_probability(trajectories: &[Trajectory], bounds: &SafetyBounds) -> Result<f64> {
    if trajectories.is_empty() {
        return Err(Error::Contract("safety probability needs at least one sample".into()));
    }
    let safe = trajectories.iter().filter(|t| bounds.admits(t)).count();
    Ok(safe as f64 / trajectories.len() as f64)
}

/// Entropy of the observation noise, `N Σ_o ½ log(2πe σ_o²)`; independent
/// of the candidate.
pub fn conditional_entropy_constant(sigma: &[f64], n: usize) -> f64 {
    n as f64 * sigma.iter().map(|s| 0.5 * (2.0 * PI * E * s * s).ln()).sum::<f64>()
}
