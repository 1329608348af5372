//! The GPODE model: a sparse GP vector field, Gaussian observation noise and
//! a fixed-width initial-state distribution centered on each episode's first
//! observation.

mod elbo;
mod train;

pub use elbo::{elbo, ElboEstimate, ElboEstimator};
pub use train::{train, TrainConfig, TrainOutcome};

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::inducing::InducingSet;
use crate::integrator::{integrate_flagged, stays_within, IntegratorConfig, Trajectory};
use crate::kernel::{factor_gram, RbfKernel};
use crate::pathwise::{DrawNoise, PosteriorSampler, SampledDynamics};
use crate::rng::{stream, tags};

/// One measured trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    /// The commanded initial state ϑ.
    pub initial_choice: Vec<f64>,
    pub times: Vec<f64>,
    /// N×d row-major noisy observations.
    pub observations: Vec<f64>,
}

impl Episode {
    pub fn new(initial_choice: Vec<f64>, times: Vec<f64>, observations: Vec<f64>) -> Result<Self> {
        let d = initial_choice.len();
        if times.is_empty() {
            return Err(Error::Contract("an episode needs at least one observation".into()));
        }
        check_dim(times.len() * d, observations.len())?;
        if times.windows(2).any(|w| w[1] <= w[0]) || times[0] < 0.0 {
            return Err(Error::Contract(format!("episode times must be strictly increasing: {times:?}")));
        }
        Ok(Self { initial_choice, times, observations })
    }

    pub fn dim(&self) -> usize {
        self.initial_choice.len()
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        let d = self.dim();
        &self.observations[i * d..(i + 1) * d]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GPODEModel {
    pub kernel: RbfKernel,
    pub inducing: InducingSet,
    /// Observation noise standard deviation per state dimension.
    pub obs_noise: Vec<f64>,
    /// Standard deviation `s₀` of the initial-state distribution.
    pub x0_std: f64,
}

/// Settings for building a model before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelInit {
    pub num_inducing: usize,
    /// Initial lengthscale as a fraction of the inducing box width.
    pub lengthscale_fraction: f64,
    /// Spread of the latent initial state around the first observation;
    /// defaults to the mean observation noise.
    pub x0_std: Option<f64>,
}

impl Default for ModelInit {
    fn default() -> Self {
        Self { num_inducing: 20, lengthscale_fraction: 0.3, x0_std: None }
    }
}

impl GPODEModel {
    pub fn new(kernel: RbfKernel, inducing: InducingSet, obs_noise: Vec<f64>, x0_std: f64) -> Result<Self> {
        let d = kernel.input_dim();
        check_dim(d, inducing.input_dim())?;
        check_dim(d, inducing.output_dim())?;
        check_dim(d, obs_noise.len())?;
        if obs_noise.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Contract(format!("observation noise must be positive: {obs_noise:?}")));
        }
        if !(x0_std.is_finite() && x0_std > 0.0) {
            return Err(Error::Contract(format!("x0 std must be positive, got {x0_std}")));
        }
        Ok(Self { kernel, inducing, obs_noise, x0_std })
    }

    pub fn dim(&self) -> usize {
        self.kernel.input_dim()
    }

    /// Build an untrained model whose inducing inputs tile `[lo, hi]` and
    /// whose variational distribution is the GP posterior of the inducing
    /// outputs given finite-difference velocity estimates from `data`.
    pub fn initialize(
        data: &[Episode],
        lo: &[f64],
        hi: &[f64],
        obs_noise: Vec<f64>,
        init: &ModelInit,
    ) -> Result<Self> {
        let d = lo.len();
        check_dim(d, hi.len())?;
        if lo.iter().zip(hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
            return Err(Error::Contract(format!("inducing box must be finite and nonempty: {lo:?} {hi:?}")));
        }
        if init.num_inducing == 0 {
            return Err(Error::Contract("need at least one inducing input".into()));
        }
        let z = inducing_grid(lo, hi, init.num_inducing);
        let lengthscales: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| init.lengthscale_fraction * (b - a)).collect();

        let (inputs, slopes, slope_var) = velocity_estimates(data, d, &obs_noise);
        let signal_variance = if slopes.is_empty() {
            1.0
        } else {
            let n = slopes.len() as f64 / d as f64;
            let mut var = 0.0;
            for o in 0..d {
                let col: Vec<f64> = slopes.chunks(d).map(|s| s[o]).collect();
                let mean = col.iter().sum::<f64>() / n;
                var += col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            }
            let noise = slope_var.iter().sum::<f64>();
            ((var - noise) / d as f64).max(1e-2)
        };
        let kernel = RbfKernel::new(lengthscales, signal_variance)?;

        let inducing = if inputs.is_empty() {
            InducingSet::prior(&kernel, z, d)?
        } else {
            let n = inputs.len() / d;
            let x = DMatrix::from_row_slice(n, d, &inputs);
            let kzz = factor_gram(&kernel, &z)?.matrix;
            let kzx = kernel.gram(&z, &x)?;
            let kxx = kernel.gram(&x, &x)?;
            let mut mean = DMatrix::zeros(z.nrows(), d);
            let mut covs = Vec::with_capacity(d);
            for o in 0..d {
                let mut a = kxx.clone();
                for i in 0..n {
                    a[(i, i)] += slope_var[o] + 1e-6 * signal_variance;
                }
                let chol = a
                    .cholesky()
                    .ok_or_else(|| Error::Numerical("velocity Gram matrix not positive definite".into()))?;
                let y = DMatrix::from_fn(n, 1, |i, _| slopes[i * d + o]);
                let m = &kzx * chol.solve(&y);
                mean.set_column(o, &m.column(0));
                let cov = &kzz - &kzx * chol.solve(&kzx.transpose());
                covs.push((&cov + cov.transpose()) * 0.5);
            }
            InducingSet::from_covariances(z, mean, &covs)?
        };
        let x0_std = init.x0_std.unwrap_or_else(|| obs_noise.iter().sum::<f64>() / obs_noise.len() as f64);
        Self::new(kernel, inducing, obs_noise, x0_std)
    }

    /// Analytic posterior mean and marginal variances of the vector field at
    /// the rows of `points`.
    pub fn field_moments(&self, points: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let (mean, covs) = crate::inducing::posterior_moments(&self.inducing, &self.kernel, points)?;
        let var = DMatrix::from_fn(points.nrows(), self.dim(), |i, o| covs[o][(i, i)].max(0.0));
        Ok((mean, var))
    }

    pub fn save(&self, path: &Path, seed: u64, system: Option<&str>) -> Result<()> {
        let ckpt = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            seed,
            system: system.map(str::to_owned),
            model: self.clone(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::from_json(&std::fs::read_to_string(path)?)
    }
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Self-describing model checkpoint document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub seed: u64,
    #[serde(default)]
    pub system: Option<String>,
    pub model: GPODEModel,
}

impl Checkpoint {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("malformed checkpoint: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == CHECKPOINT_SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Schema(format!(
                    "checkpoint schema_version {v} is not supported (expected {CHECKPOINT_SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Schema("checkpoint has no schema_version".into())),
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::Schema(format!("invalid checkpoint: {e}")))?;
        let m = &ckpt.model;
        GPODEModel::new(m.kernel.clone(), m.inducing.clone(), m.obs_noise.clone(), m.x0_std)
            .map_err(|e| Error::Schema(format!("invalid checkpoint model: {e}")))?;
        Ok(ckpt)
    }
}

/// Evenly tiles `[lo, hi]` with `count` points: the largest regular grid of
/// cell centers not exceeding `count`, topped up with Halton points.
pub fn inducing_grid(lo: &[f64], hi: &[f64], count: usize) -> DMatrix<f64> {
    let d = lo.len();
    let mut per_dim = vec![1usize; d];
    loop {
        let k = (0..d).min_by_key(|&k| (per_dim[k], k)).unwrap();
        let total: usize = per_dim.iter().product::<usize>() / per_dim[k] * (per_dim[k] + 1);
        if total > count {
            break;
        }
        per_dim[k] += 1;
    }
    let grid_total: usize = per_dim.iter().product();
    let mut rows: Vec<f64> = Vec::with_capacity(count * d);
    for idx in 0..grid_total {
        let mut rem = idx;
        for k in 0..d {
            let i = rem % per_dim[k];
            rem /= per_dim[k];
            rows.push(lo[k] + (i as f64 + 0.5) / per_dim[k] as f64 * (hi[k] - lo[k]));
        }
    }
    const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    for n in 0..(count - grid_total) {
        for k in 0..d {
            let u = halton(n as u64 + 1, PRIMES[k % PRIMES.len()]);
            rows.push(lo[k] + u * (hi[k] - lo[k]));
        }
    }
    DMatrix::from_row_slice(count, d, &rows)
}

fn halton(mut i: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Midpoint states, finite-difference velocities and the per-output
/// velocity noise variance `2σ²/Δt²` (largest over intervals).
fn velocity_estimates(data: &[Episode], d: usize, obs_noise: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut inputs = Vec::new();
    let mut slopes = Vec::new();
    let mut min_dt = f64::INFINITY;
    for ep in data {
        for i in 1..ep.len() {
            let dt = ep.times[i] - ep.times[i - 1];
            min_dt = min_dt.min(dt);
            let (a, b) = (ep.observation(i - 1), ep.observation(i));
            for k in 0..d {
                inputs.push(0.5 * (a[k] + b[k]));
                slopes.push((b[k] - a[k]) / dt);
            }
        }
    }
    let var = obs_noise.iter().map(|s| 2.0 * s * s / (min_dt * min_dt)).collect();
    (inputs, slopes, var)
}

/// Draw `k` vector fields from the posterior and integrate each from `x0`
/// (or from `x0 + s₀ζ` when `x0_noise` is set). Failed integrations are
/// returned with their divergence flag set.
#[allow(clippy::too_many_arguments)]
pub fn predict_trajectories<R: Rng + ?Sized>(
    model: &GPODEModel,
    x0: &[f64],
    times: &[f64],
    k: usize,
    n_features: usize,
    integrator: &IntegratorConfig,
    rng: &mut R,
    x0_noise: bool,
) -> Result<Vec<Trajectory>> {
    check_dim(model.dim(), x0.len())?;
    if k == 0 {
        return Err(Error::Contract("need at least one trajectory sample".into()));
    }
    let sampler = PosteriorSampler::new(&model.inducing, &model.kernel)?;
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let g = sampler.draw(n_features, rng)?;
        let start: Vec<f64> = if x0_noise {
            x0.iter().map(|v| v + model.x0_std * rng.sample::<f64, _>(StandardNormal)).collect()
        } else {
            x0.to_vec()
        };
        out.push(integrate_flagged(|x, o| g.eval_into(x, o), &start, times, integrator)?);
    }
    Ok(out)
}

/// A fixed set of posterior function draws, shared across many rollouts.
/// Draw `l` uses its own stream so that ensembles of different sizes from
/// the same seed agree on their common prefix.
#[derive(Debug, Clone)]
pub struct DynamicsEnsemble {
    draws: Vec<SampledDynamics>,
    x0_std: f64,
}

impl DynamicsEnsemble {
    pub fn sample(model: &GPODEModel, k: usize, n_features: usize, seed: u64) -> Result<Self> {
        if k == 0 || n_features == 0 {
            return Err(Error::Contract("ensemble needs at least one draw and one feature".into()));
        }
        let sampler = PosteriorSampler::new(&model.inducing, &model.kernel)?;
        let (l, d) = (model.inducing.num_inducing(), model.dim());
        let draws = (0..k)
            .map(|i| {
                let mut rng = stream(seed, tags::DRAW, i as u64);
                sampler.build(&DrawNoise::sample(n_features, l, d, d, &mut rng))
            })
            .collect::<Result<_>>()?;
        Ok(Self { draws, x0_std: model.x0_std })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn draws(&self) -> &[SampledDynamics] {
        &self.draws
    }

    /// Whether at least a `delta` fraction of draws keep the start and every
    /// reported state inside `inside`. Integration of a draw stops at its first
    /// violation, and the scan stops as soon as the verdict is settled.
    pub fn meets_fraction<R: Rng + ?Sized, P: Fn(&[f64]) -> bool>(
        &self,
        x0: &[f64],
        times: &[f64],
        integrator: &IntegratorConfig,
        mut x0_noise: Option<&mut R>,
        delta: f64,
        inside: P,
    ) -> Result<bool> {
        let k = self.draws.len() as f64;
        let (mut hits, mut misses) = (0usize, 0usize);
        for g in &self.draws {
            check_dim(g.input_dim(), x0.len())?;
            let start: Vec<f64> = match x0_noise.as_deref_mut() {
                Some(rng) => x0.iter().map(|v| v + self.x0_std * rng.sample::<f64, _>(StandardNormal)).collect(),
                None => x0.to_vec(),
            };
            if inside(&start) && stays_within(|x, o| g.eval_into(x, o), &start, times, integrator, &inside)? {
                hits += 1;
            } else {
                misses += 1;
            }
            if hits as f64 >= delta * k {
                return Ok(true);
            }
            if (k - misses as f64) < delta * k {
                return Ok(false);
            }
        }
        Ok(hits as f64 >= delta * k)
    }

    /// Integrate every draw from `x0`, perturbing the start by `s₀ζ` per draw
    /// when `x0_noise` is given.
    pub fn rollout<R: Rng + ?Sized>(
        &self,
        x0: &[f64],
        times: &[f64],
        integrator: &IntegratorConfig,
        mut x0_noise: Option<&mut R>,
    ) -> Result<Vec<Trajectory>> {
        self.draws
            .iter()
            .map(|g| {
                check_dim(g.input_dim(), x0.len())?;
                let start: Vec<f64> = match x0_noise.as_deref_mut() {
                    Some(rng) => x0.iter().map(|v| v + self.x0_std * rng.sample::<f64, _>(StandardNormal)).collect(),
                    None => x0.to_vec(),
                };
                integrate_flagged(|x, o| g.eval_into(x, o), &start, times, integrator)
            })
            .collect()
    }
}

/// Noisy observations `y = x + ε`, `ε ~ N(0, σ²)` per entry. Diverged
/// trajectories yield NaN observations.
pub fn sample_observations<R: Rng + ?Sized>(trajectories: &[Trajectory], sigma: &[f64], rng: &mut R) -> Vec<Vec<f64>> {
    trajectories
        .iter()
        .map(|tr| {
            let d = tr.dim();
            tr.states
                .iter()
                .enumerate()
                .map(|(i, x)| x + sigma[i % d] * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}
