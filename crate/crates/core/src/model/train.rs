//! ELBO maximization with Adam.
//!
//! Trained parameters: the variational means, the covariance factors (with
//! log-parameterized diagonals), the log lengthscales, the log signal
//! variance and optionally the log observation noise. Inducing inputs and
//! the initial-state width stay fixed.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::elbo::{default_max_step, ElboEstimator, ModelGradient};
use super::{Episode, GPODEModel};
use crate::error::{Error, Result};
use crate::inducing::InducingSet;
use crate::kernel::RbfKernel;
use crate::rng::{stream, tags};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Function draws per ELBO estimate.
    pub draws: usize,
    pub seed: u64,
    pub train_noise: bool,
    pub n_features: usize,
    /// Longest RK4 step; defaults to half the shortest observation interval.
    pub max_step: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 100,
            learning_rate: 0.05,
            draws: 4,
            seed: 0,
            train_noise: true,
            n_features: 256,
            max_step: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.draws == 0 || self.n_features == 0 {
            return Err(Error::Config("iterations, draws and n_features must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0) {
                return Err(Error::Config(format!("max_step must be positive, got {h}")));
            }
        }
        Ok(())
    }

    pub fn estimator(&self, data: &[Episode]) -> ElboEstimator {
        ElboEstimator::new(self.draws, self.n_features, self.max_step.unwrap_or_else(|| default_max_step(data)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: GPODEModel,
    /// Negative ELBO estimate at each iteration, before the update.
    pub loss_trace: Vec<f64>,
}

/// Flat parameter vector layout: means (L×p, row-major), per-output factor
/// lower triangles (row-major, diagonal as log), log lengthscales, log signal
/// variance, log noise.
struct Layout {
    l: usize,
    d: usize,
}

impl Layout {
    fn tri(&self) -> usize {
        self.l * (self.l + 1) / 2
    }

    fn len(&self) -> usize {
        self.l * self.d + self.d * self.tri() + self.d + 1 + self.d
    }

    fn pack(&self, m: &GPODEModel) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.l {
            for o in 0..self.d {
                out.push(m.inducing.mean[(j, o)]);
            }
        }
        for f in &m.inducing.cov_factors {
            for i in 0..self.l {
                for j in 0..=i {
                    out.push(if i == j { f[(i, i)].abs().max(1e-12).ln() } else { f[(i, j)] });
                }
            }
        }
        out.extend(m.kernel.lengthscales.iter().map(|v| v.ln()));
        out.push(m.kernel.signal_variance.ln());
        out.extend(m.obs_noise.iter().map(|v| v.ln()));
        out
    }

    fn unpack(&self, template: &GPODEModel, theta: &[f64]) -> Result<GPODEModel> {
        let (l, d) = (self.l, self.d);
        let mut it = theta.iter().copied();
        let mut next = || it.next().expect("parameter vector length");
        let mut mean = DMatrix::zeros(l, d);
        for j in 0..l {
            for o in 0..d {
                mean[(j, o)] = next();
            }
        }
        let mut factors = Vec::with_capacity(d);
        for _ in 0..d {
            let mut f = DMatrix::zeros(l, l);
            for i in 0..l {
                for j in 0..=i {
                    let v = next();
                    f[(i, j)] = if i == j { v.exp() } else { v };
                }
            }
            factors.push(f);
        }
        let lengthscales: Vec<f64> = (0..d).map(|_| next().exp()).collect();
        let signal = next().exp();
        let noise: Vec<f64> = (0..d).map(|_| next().exp()).collect();
        let inducing = InducingSet::new(template.inducing.inputs.clone(), mean, factors)?;
        GPODEModel::new(RbfKernel::new(lengthscales, signal)?, inducing, noise, template.x0_std)
    }

    fn pack_gradient(&self, m: &GPODEModel, g: &ModelGradient) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for j in 0..self.l {
            for o in 0..self.d {
                out.push(g.mean[(j, o)]);
            }
        }
        for (gf, f) in g.factors.iter().zip(&m.inducing.cov_factors) {
            for i in 0..self.l {
                for j in 0..=i {
                    out.push(if i == j { gf[(i, i)] * f[(i, i)] } else { gf[(i, j)] });
                }
            }
        }
        out.extend_from_slice(&g.log_lengthscales);
        out.push(g.log_signal_variance);
        out.extend_from_slice(&g.log_obs_noise);
        out
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Maximize the ELBO of `model` on `data`. Deterministic given `config.seed`.
pub fn train(model: &GPODEModel, data: &[Episode], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Contract("training needs at least one episode".into()));
    }
    let layout = Layout { l: model.inducing.num_inducing(), d: model.dim() };
    let estimator = config.estimator(data);
    let mut theta = layout.pack(model);
    let n = theta.len();
    let noise_start = n - layout.d;
    let hyper_start = noise_start - layout.d - 1;

    // Box constraints on the log hyperparameters, relative to their start.
    let lower: Vec<f64> = theta[hyper_start..]
        .iter()
        .enumerate()
        .map(|(i, v)| if hyper_start + i >= noise_start { (1e-4f64).ln().min(*v) } else { v - 20f64.ln() })
        .collect();
    let upper: Vec<f64> = theta[hyper_start..].iter().map(|v| v + 20f64.ln()).collect();

    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut current = model.clone();
    let mut trace = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let mut rng = stream(config.seed, tags::TRAIN, iter as u64);
        let (est, grad) = estimator.estimate_with_gradient(&current, data, &mut rng)?;
        if !est.value.is_finite() {
            return Err(Error::NonFiniteObjective { iteration: iter });
        }
        trace.push(-est.value);
        let mut g = layout.pack_gradient(&current, &grad);
        if !config.train_noise {
            g[noise_start..].iter_mut().for_each(|v| *v = 0.0);
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteObjective { iteration: iter });
        }
        let t = (iter + 1) as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for i in 0..n {
            m1[i] = BETA1 * m1[i] + (1.0 - BETA1) * g[i];
            m2[i] = BETA2 * m2[i] + (1.0 - BETA2) * g[i] * g[i];
            // Ascent step.
            theta[i] += config.learning_rate * (m1[i] / c1) / ((m2[i] / c2).sqrt() + EPS);
        }
        for (i, v) in theta[hyper_start..].iter_mut().enumerate() {
            *v = v.clamp(lower[i], upper[i]);
        }
        current = layout.unpack(model, &theta)?;
    }
    Ok(TrainOutcome { model: current, loss_trace: trace })
}
