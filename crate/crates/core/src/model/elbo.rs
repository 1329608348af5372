//! Monte-Carlo evidence lower bound and its reparameterized gradient.
//!
//! Each draw samples one vector field (Fourier prior + Matheron update) and,
//! per episode, one initial state `x0 = y_1 + s₀ζ'`. Trajectories are rolled
//! out with fixed-grid RK4 so the discrete adjoint can be taken exactly; the
//! gradient flows through the integrator into the update weights `v`, then
//! through `v = K⁻¹(μ_u + Fζ − Φw)` into the variational parameters and the
//! kernel hyperparameters.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{Episode, GPODEModel};
use crate::error::{Error, Result};
use crate::fourier::FourierFeatureSet;
use crate::integrator::substeps;
use crate::kernel::{factor_gram, FactoredGram};
use crate::pathwise::DrawNoise;

/// Per-episode log-likelihood floor for draws whose rollout diverged or fit
/// catastrophically.
pub const LOGLIK_CAP: f64 = -1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimator {
    pub draws: usize,
    pub n_features: usize,
    /// Longest RK4 step of the rollout integrator.
    pub max_step: f64,
}

impl ElboEstimator {
    pub fn new(draws: usize, n_features: usize, max_step: f64) -> Self {
        Self { draws, n_features, max_step }
    }

    /// Default estimator for `data`: 256 features, RK4 step of half the
    /// shortest observation interval.
    pub fn for_data(draws: usize, data: &[Episode]) -> Self {
        Self::new(draws, 256, default_max_step(data))
    }
}

pub(crate) fn default_max_step(data: &[Episode]) -> f64 {
    let min_dt = data
        .iter()
        .flat_map(|e| e.times.windows(2).map(|w| w[1] - w[0]))
        .fold(f64::INFINITY, f64::min);
    if min_dt.is_finite() {
        0.5 * min_dt
    } else {
        0.05
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub kl: f64,
    pub expected_loglik: f64,
    /// Total log-likelihood minus KL for each draw.
    pub per_draw: Vec<f64>,
}

impl ElboEstimate {
    /// Monte-Carlo standard error of `value`.
    pub fn std_error(&self) -> f64 {
        let n = self.per_draw.len() as f64;
        if n < 2.0 {
            return 0.0;
        }
        let mean = self.per_draw.iter().sum::<f64>() / n;
        let var = self.per_draw.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    }
}

/// Gradient of the ELBO with respect to the model's natural parameters.
/// `factors` holds derivatives with respect to the entries of the lower
/// triangular covariance factors.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ModelGradient {
    pub mean: DMatrix<f64>,
    pub factors: Vec<DMatrix<f64>>,
    pub log_lengthscales: Vec<f64>,
    pub log_signal_variance: f64,
    pub log_obs_noise: Vec<f64>,
}

impl ModelGradient {
    fn zeros(l: usize, d: usize) -> Self {
        Self {
            mean: DMatrix::zeros(l, d),
            factors: vec![DMatrix::zeros(l, l); d],
            log_lengthscales: vec![0.0; d],
            log_signal_variance: 0.0,
            log_obs_noise: vec![0.0; d],
        }
    }

    fn add_scaled(&mut self, other: &ModelGradient, scale: f64) {
        self.mean += &other.mean * scale;
        for (a, b) in self.factors.iter_mut().zip(&other.factors) {
            *a += b * scale;
        }
        for (a, b) in self.log_lengthscales.iter_mut().zip(&other.log_lengthscales) {
            *a += b * scale;
        }
        self.log_signal_variance += other.log_signal_variance * scale;
        for (a, b) in self.log_obs_noise.iter_mut().zip(&other.log_obs_noise) {
            *a += b * scale;
        }
    }
}

/// ELBO estimate with `k_train` draws and default settings.
pub fn elbo<R: Rng + ?Sized>(model: &GPODEModel, data: &[Episode], k_train: usize, rng: &mut R) -> Result<f64> {
    Ok(ElboEstimator::for_data(k_train, data).estimate(model, data, rng)?.value)
}

impl ElboEstimator {
    pub fn estimate<R: Rng + ?Sized>(&self, model: &GPODEModel, data: &[Episode], rng: &mut R) -> Result<ElboEstimate> {
        Ok(self.run(model, data, rng, false)?.0)
    }

    pub(crate) fn estimate_with_gradient<R: Rng + ?Sized>(
        &self,
        model: &GPODEModel,
        data: &[Episode],
        rng: &mut R,
    ) -> Result<(ElboEstimate, ModelGradient)> {
        let (est, grad) = self.run(model, data, rng, true)?;
        Ok((est, grad.expect("gradient requested")))
    }

    fn run<R: Rng + ?Sized>(
        &self,
        model: &GPODEModel,
        data: &[Episode],
        rng: &mut R,
        want_grad: bool,
    ) -> Result<(ElboEstimate, Option<ModelGradient>)> {
        if self.draws == 0 {
            return Err(Error::Contract("ELBO needs at least one draw".into()));
        }
        let d = model.dim();
        for ep in data {
            if ep.is_empty() {
                return Err(Error::Contract("episodes must be non-empty".into()));
            }
            crate::error::check_dim(d, ep.dim())?;
        }
        let l = model.inducing.num_inducing();
        let gram = factor_gram(&model.kernel, &model.inducing.inputs)?;

        let (kl, kl_grad) = kl_with_gradient(model, &gram, want_grad)?;

        // All randomness is drawn up front, in a fixed order.
        let noises: Vec<(DrawNoise, Vec<Vec<f64>>)> = (0..self.draws)
            .map(|_| {
                let noise = DrawNoise::sample(self.n_features, l, d, d, rng);
                let x0: Vec<Vec<f64>> = data
                    .iter()
                    .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
                    .collect();
                (noise, x0)
            })
            .collect();

        let results: Vec<Result<(f64, Option<ModelGradient>)>> = noises
            .par_iter()
            .map(|(noise, x0_noise)| self.single_draw(model, data, &gram, noise, x0_noise, want_grad))
            .collect();

        let mut per_draw = Vec::with_capacity(self.draws);
        let mut loglik_sum = 0.0;
        let mut grad = want_grad.then(|| ModelGradient::zeros(l, d));
        let scale = 1.0 / self.draws as f64;
        for r in results {
            let (ll, g) = r?;
            per_draw.push(ll - kl);
            loglik_sum += ll;
            if let (Some(acc), Some(g)) = (grad.as_mut(), g.as_ref()) {
                acc.add_scaled(g, scale);
            }
        }
        if let (Some(acc), Some(kg)) = (grad.as_mut(), kl_grad.as_ref()) {
            acc.add_scaled(kg, -1.0);
        }
        let expected_loglik = loglik_sum * scale;
        let value = expected_loglik - kl;
        Ok((ElboEstimate { value, kl, expected_loglik, per_draw }, grad))
    }

    fn single_draw(
        &self,
        model: &GPODEModel,
        data: &[Episode],
        gram: &FactoredGram,
        noise: &DrawNoise,
        x0_noise: &[Vec<f64>],
        want_grad: bool,
    ) -> Result<(f64, Option<ModelGradient>)> {
        let d = model.dim();
        let features = FourierFeatureSet::from_noise(&model.kernel, &noise.features)?;
        let u = model.inducing.outputs_from_noise(&noise.inducing);
        let phi = features.feature_matrix(&model.inducing.inputs)?;
        let w = DMatrix::from_row_slice(noise.features.n_features, d, &noise.features.weights);
        let v = gram.solve(&(u - &phi * &w));
        let field = DiffField::new(model, &features, &v);

        let mut total = 0.0;
        let mut fgrad = FieldGrad::zeros(field.l, d);
        let mut noise_grad = vec![0.0; d];
        for (ep, zeta) in data.iter().zip(x0_noise) {
            let x0: Vec<f64> = ep
                .observation(0)
                .iter()
                .zip(zeta)
                .map(|(y, z)| y + model.x0_std * z)
                .collect();
            let rollout = Rollout::run(&field, ep, &x0, self.max_step);
            let (ll, dll_dx) = match &rollout {
                Some(r) => log_likelihood(ep, &r.states, &model.obs_noise),
                None => (f64::NEG_INFINITY, Vec::new()),
            };
            if !ll.is_finite() || ll < LOGLIK_CAP {
                total += LOGLIK_CAP;
                continue;
            }
            total += ll;
            if want_grad {
                let rollout = rollout.expect("finite likelihood implies a rollout");
                for (o, g) in noise_grad.iter_mut().enumerate() {
                    let s2 = model.obs_noise[o].powi(2);
                    *g += (0..ep.len())
                        .map(|i| (ep.observation(i)[o] - rollout.states[i * d + o]).powi(2) / s2 - 1.0)
                        .sum::<f64>();
                }
                rollout.backward(&field, &dll_dx, &mut fgrad);
            }
        }
        if !want_grad {
            return Ok((total, None));
        }
        let mut grad = ModelGradient::zeros(field.l, d);
        grad.log_obs_noise = noise_grad;
        grad.log_lengthscales = fgrad.log_l.clone();
        grad.log_signal_variance = fgrad.log_s;
        let gv = DMatrix::from_row_slice(field.l, d, &fgrad.v);
        backprop_update_weights(model, gram, &features, &phi, &w, &v, &noise.inducing, &gv, &mut grad);
        Ok((total, Some(grad)))
    }
}

/// Sum of diagonal-Gaussian log densities of the observations and its
/// derivative with respect to the predicted states.
fn log_likelihood(ep: &Episode, states: &[f64], sigma: &[f64]) -> (f64, Vec<f64>) {
    let d = ep.dim();
    let mut ll = 0.0;
    let mut grad = vec![0.0; states.len()];
    let norm: f64 = sigma.iter().map(|s| -0.5 * (2.0 * std::f64::consts::PI * s * s).ln()).sum();
    for i in 0..ep.len() {
        let y = ep.observation(i);
        ll += norm;
        for k in 0..d {
            let r = y[k] - states[i * d + k];
            let s2 = sigma[k] * sigma[k];
            ll -= 0.5 * r * r / s2;
            grad[i * d + k] = r / s2;
        }
    }
    (ll, grad)
}

fn kl_with_gradient(
    model: &GPODEModel,
    gram: &FactoredGram,
    want_grad: bool,
) -> Result<(f64, Option<ModelGradient>)> {
    let kl = crate::inducing::kl_divergence(&model.inducing, &model.kernel)?;
    if !want_grad {
        return Ok((kl, None));
    }
    let l = model.inducing.num_inducing();
    let d = model.dim();
    let kinv = gram.inverse();
    let mut grad = ModelGradient::zeros(l, d);
    let mut gk = DMatrix::zeros(l, l);
    for o in 0..d {
        let mu = model.inducing.mean.column(o).into_owned();
        let f = &model.inducing.cov_factors[o];
        let kinv_mu = &kinv * &mu;
        grad.mean.set_column(o, &kinv_mu);
        let mut gf = (&kinv * f).lower_triangle();
        for i in 0..l {
            gf[(i, i)] -= 1.0 / f[(i, i)];
        }
        grad.factors[o] = gf;
        let s = f * f.transpose();
        gk += (&kinv - &kinv * s * &kinv - &kinv_mu * kinv_mu.transpose()) * 0.5;
    }
    contract_gram_gradient(model, gram, &gk, &mut grad);
    Ok((kl, Some(grad)))
}

/// Adds `Σ_jm G_jm ∂K_jm/∂θ` for the log hyperparameters.
fn contract_gram_gradient(model: &GPODEModel, gram: &FactoredGram, gk: &DMatrix<f64>, grad: &mut ModelGradient) {
    let z = &model.inducing.inputs;
    let l = z.nrows();
    let d = z.ncols();
    let ls = &model.kernel.lengthscales;
    grad.log_signal_variance += gk.component_mul(&gram.matrix).sum();
    for j in 0..l {
        for m in 0..l {
            if j == m {
                continue;
            }
            let k_raw = gram.matrix[(j, m)];
            let g = gk[(j, m)] * k_raw;
            if g == 0.0 {
                continue;
            }
            for k in 0..d {
                let diff = (z[(j, k)] - z[(m, k)]) / ls[k];
                grad.log_lengthscales[k] += g * diff * diff;
            }
        }
    }
}

/// Back-propagates `∂/∂v` through `v = K⁻¹(μ_u + Fζ − Φw)`.
#[allow(clippy::too_many_arguments)]
fn backprop_update_weights(
    model: &GPODEModel,
    gram: &FactoredGram,
    features: &FourierFeatureSet,
    phi: &DMatrix<f64>,
    w: &DMatrix<f64>,
    v: &DMatrix<f64>,
    zeta: &DMatrix<f64>,
    gv: &DMatrix<f64>,
    grad: &mut ModelGradient,
) {
    let q = gram.solve(gv);
    let d = model.dim();
    grad.mean += &q;
    for o in 0..d {
        let outer = q.column(o) * zeta.column(o).transpose();
        grad.factors[o] += outer.lower_triangle();
    }
    let gk = -(&q * v.transpose());
    contract_gram_gradient(model, gram, &gk, grad);

    // Φ_ji = a cos(ω_iᵀ Z_j + b_i)
    let g_phi = -(&q * w.transpose());
    grad.log_signal_variance += 0.5 * g_phi.component_mul(phi).sum();
    let z = &model.inducing.inputs;
    let a = features.amplitude();
    for i in 0..features.n_features() {
        let om = features.frequency(i);
        let b = features.phases()[i];
        for j in 0..z.nrows() {
            let gp = g_phi[(j, i)];
            if gp == 0.0 {
                continue;
            }
            let mut u = b;
            for k in 0..d {
                u += om[k] * z[(j, k)];
            }
            let coef = gp * a * u.sin();
            for k in 0..d {
                grad.log_lengthscales[k] += coef * om[k] * z[(j, k)];
            }
        }
    }
}

/// A sampled vector field with hand-written vector-Jacobian products.
struct DiffField {
    d: usize,
    l: usize,
    n_features: usize,
    omega: Vec<f64>,
    phases: Vec<f64>,
    weights: Vec<f64>,
    amp: f64,
    v: Vec<f64>,
    z: Vec<f64>,
    inv_l2: Vec<f64>,
    signal: f64,
}

#[derive(Debug, Clone)]
struct FieldGrad {
    log_l: Vec<f64>,
    log_s: f64,
    v: Vec<f64>,
}

impl FieldGrad {
    fn zeros(l: usize, d: usize) -> Self {
        Self { log_l: vec![0.0; d], log_s: 0.0, v: vec![0.0; l * d] }
    }
}

impl DiffField {
    fn new(model: &GPODEModel, features: &FourierFeatureSet, v: &DMatrix<f64>) -> Self {
        let d = model.dim();
        let l = v.nrows();
        let n_features = features.n_features();
        let omega = (0..n_features).flat_map(|i| features.frequency(i).to_vec()).collect();
        let weights = (0..n_features)
            .flat_map(|i| (0..d).map(move |o| (i, o)))
            .map(|(i, o)| features.weight(i, o))
            .collect();
        let z = &model.inducing.inputs;
        Self {
            d,
            l,
            n_features,
            omega,
            phases: features.phases().to_vec(),
            weights,
            amp: features.amplitude(),
            v: (0..l).flat_map(|j| (0..d).map(move |o| (j, o))).map(|(j, o)| v[(j, o)]).collect(),
            z: (0..l).flat_map(|j| (0..d).map(move |k| (j, k))).map(|(j, k)| z[(j, k)]).collect(),
            inv_l2: model.kernel.lengthscales.iter().map(|l| 1.0 / (l * l)).collect(),
            signal: model.kernel.signal_variance,
        }
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        let d = self.d;
        out.fill(0.0);
        for i in 0..self.n_features {
            let om = &self.omega[i * d..(i + 1) * d];
            let mut u = self.phases[i];
            for k in 0..d {
                u += om[k] * x[k];
            }
            let c = self.amp * u.cos();
            for o in 0..d {
                out[o] += self.weights[i * d + o] * c;
            }
        }
        for j in 0..self.l {
            let zj = &self.z[j * d..(j + 1) * d];
            let mut r = 0.0;
            for k in 0..d {
                let t = x[k] - zj[k];
                r += t * t * self.inv_l2[k];
            }
            let kj = self.signal * (-0.5 * r).exp();
            for o in 0..d {
                out[o] += self.v[j * d + o] * kj;
            }
        }
    }

    /// `gx = λᵀ ∂g/∂x`; parameter gradients are accumulated into `g`.
    fn vjp(&self, x: &[f64], lam: &[f64], gx: &mut [f64], g: &mut FieldGrad) {
        let d = self.d;
        gx.fill(0.0);
        let mut prior_dot = 0.0;
        for i in 0..self.n_features {
            let om = &self.omega[i * d..(i + 1) * d];
            let mut beta = 0.0;
            for o in 0..d {
                beta += lam[o] * self.weights[i * d + o];
            }
            if beta == 0.0 {
                continue;
            }
            let mut u = self.phases[i];
            for k in 0..d {
                u += om[k] * x[k];
            }
            let (s, c) = u.sin_cos();
            prior_dot += self.amp * beta * c;
            let coef = -self.amp * beta * s;
            for k in 0..d {
                gx[k] += coef * om[k];
            }
        }
        // ω = ε/l, so ∂u/∂log l_k = -ω_k x_k.
        for k in 0..d {
            g.log_l[k] -= x[k] * gx[k];
        }
        g.log_s += 0.5 * prior_dot;

        let mut update_dot = 0.0;
        for j in 0..self.l {
            let zj = &self.z[j * d..(j + 1) * d];
            let mut r = 0.0;
            for k in 0..d {
                let t = x[k] - zj[k];
                r += t * t * self.inv_l2[k];
            }
            let kj = self.signal * (-0.5 * r).exp();
            let mut gamma = 0.0;
            for o in 0..d {
                gamma += lam[o] * self.v[j * d + o];
                g.v[j * d + o] += lam[o] * kj;
            }
            let gk = gamma * kj;
            update_dot += gk;
            for k in 0..d {
                let t = x[k] - zj[k];
                gx[k] -= gk * t * self.inv_l2[k];
                g.log_l[k] += gk * t * t * self.inv_l2[k];
            }
        }
        g.log_s += update_dot;
    }
}

/// Fixed-grid RK4 rollout that keeps every stage point for the adjoint pass.
struct Rollout {
    /// N×d states at the observation times.
    states: Vec<f64>,
    /// Per step: the four stage points, 4d values.
    stages: Vec<f64>,
    step_sizes: Vec<f64>,
    /// Number of completed steps when observation `i` is reached.
    obs_step: Vec<usize>,
}

impl Rollout {
    /// Starts at the first observation time. Returns `None` on a non-finite
    /// state.
    fn run(field: &DiffField, ep: &Episode, x0: &[f64], max_step: f64) -> Option<Self> {
        let d = field.d;
        let mut x = x0.to_vec();
        let mut states = Vec::with_capacity(ep.len() * d);
        states.extend_from_slice(&x);
        let mut stages = Vec::new();
        let mut step_sizes = Vec::new();
        let mut obs_step = vec![0];
        let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        let mut pt = vec![0.0; d];
        for i in 1..ep.len() {
            let span = ep.times[i] - ep.times[i - 1];
            let n = substeps(span, max_step);
            let h = span / n as f64;
            for _ in 0..n {
                let base = stages.len();
                stages.extend_from_slice(&x);
                field.eval(&x, &mut k[0]);
                for s in 1..4 {
                    let c = if s == 3 { h } else { 0.5 * h };
                    for q in 0..d {
                        pt[q] = x[q] + c * k[s - 1][q];
                    }
                    stages.extend_from_slice(&pt);
                    field.eval(&pt, &mut k[s]);
                }
                debug_assert_eq!(stages.len(), base + 4 * d);
                for q in 0..d {
                    x[q] += h / 6.0 * (k[0][q] + 2.0 * k[1][q] + 2.0 * k[2][q] + k[3][q]);
                }
                step_sizes.push(h);
                if !x.iter().all(|v| v.is_finite()) {
                    return None;
                }
            }
            obs_step.push(step_sizes.len());
            states.extend_from_slice(&x);
        }
        Some(Self { states, stages, step_sizes, obs_step })
    }

    fn backward(&self, field: &DiffField, dll_dx: &[f64], g: &mut FieldGrad) {
        let d = field.d;
        let n = self.obs_step.len();
        let mut lam = vec![0.0; d];
        let mut gx = vec![0.0; d];
        let mut mu = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        let mut next = vec![0.0; d];
        for i in (0..n).rev() {
            for q in 0..d {
                lam[q] += dll_dx[i * d + q];
            }
            if i == 0 {
                break;
            }
            for step in (self.obs_step[i - 1]..self.obs_step[i]).rev() {
                let h = self.step_sizes[step];
                let pts = &self.stages[step * 4 * d..(step + 1) * 4 * d];
                let weights = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
                for s in 0..4 {
                    for q in 0..d {
                        mu[s][q] = weights[s] * lam[q];
                    }
                }
                next.copy_from_slice(&lam);
                // Stage s+1 was evaluated at x + c_s h k_s.
                for s in (0..4).rev() {
                    field.vjp(&pts[s * d..(s + 1) * d], &mu[s], &mut gx, g);
                    for q in 0..d {
                        next[q] += gx[q];
                    }
                    if s > 0 {
                        let c = if s == 3 { h } else { 0.5 * h };
                        for q in 0..d {
                            mu[s - 1][q] += c * gx[q];
                        }
                    }
                }
                lam.copy_from_slice(&next);
            }
        }
    }
}
