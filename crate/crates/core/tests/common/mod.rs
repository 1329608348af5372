#![allow(dead_code)]

use std::f64::consts::{E, PI};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use salgpode::acquisition::{entropy_acquisition, SamplingConfig};
use salgpode::harness::{read_metrics, run_sal_loop, write_metrics, ExperimentConfig, MetricsConfig, RunState};
use salgpode::inducing::{kl_divergence, posterior_moments, InducingSet};
use salgpode::integrator::{integrate, IntegratorConfig, Trajectory};
use salgpode::kernel::RbfKernel;
use salgpode::model::{Episode, GPODEModel, ModelInit, TrainConfig};
use salgpode::pathwise::PosteriorSampler;
use salgpode::planner::{propose, Acquisition, PlannerConfig};
use salgpode::rng::{from_seed, stream, tags};
use salgpode::systems::SystemSpec;

/// Outcome of one check with a one-line explanation.
pub struct Check {
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }

    pub fn line(&self, name: &str) -> String {
        format!("{} {name}: {}", if self.passed { "PASS" } else { "FAIL" }, self.detail)
    }
}

/// Smallest settings that still exercise every stage of the loop.
pub fn tiny_config(budget: usize) -> ExperimentConfig {
    ExperimentConfig {
        budget,
        planner: PlannerConfig {
            n_candidates: 6,
            sampling: SamplingConfig { draws: 6, n_features: 32, ..SamplingConfig::default() },
            ..PlannerConfig::default()
        },
        train: TrainConfig { iterations: 5, draws: 1, n_features: 32, ..TrainConfig::default() },
        model: ModelInit { num_inducing: 9, ..ModelInit::default() },
        metrics: MetricsConfig {
            validation_points: 3,
            validation_grid: 4,
            nll_draws: 4,
            f1_grid: 3,
            f1_draws: 4,
            n_features: 32,
            ..MetricsConfig::default()
        },
        ..ExperimentConfig::default()
    }
}

fn random_lower(l: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(l, l, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => 0.3 * rng.sample::<f64, _>(StandardNormal),
        std::cmp::Ordering::Equal => rng.gen_range(0.2..0.8),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// A 2-D, 2-output sparse posterior with non-trivial mean and covariance.
pub fn random_posterior(seed: u64) -> (RbfKernel, InducingSet) {
    let mut rng = from_seed(seed);
    let kernel = RbfKernel::new(vec![1.0, 1.4], 1.5).unwrap();
    let l = 6;
    let z = DMatrix::from_fn(l, 2, |_, _| rng.gen_range(-2.0..2.0));
    let mean = DMatrix::from_fn(l, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
    let factors = vec![random_lower(l, &mut rng), random_lower(l, &mut rng)];
    (kernel, InducingSet::new(z, mean, factors).unwrap())
}

/// Sample mean and variance of decoupled draws against the analytic sparse
/// posterior, each within 3 Monte Carlo standard errors.
pub fn decoupled_moments(draws: usize, seed: u64) -> Check {
    let (kernel, q) = random_posterior(seed);
    let mut rng = from_seed(seed + 1);
    let points = DMatrix::from_fn(10, 2, |_, _| rng.gen_range(-2.5..2.5));
    let (mean, covs) = posterior_moments(&q, &kernel, &points).unwrap();
    let sampler = PosteriorSampler::new(&q, &kernel).unwrap();
    let values: Vec<Vec<f64>> = (0..draws)
        .map(|i| {
            let g = sampler.draw(256, &mut stream(seed, tags::DRAW, i as u64)).unwrap();
            (0..10).flat_map(|r| g.evaluate(&[points[(r, 0)], points[(r, 1)]]).unwrap()).collect()
        })
        .collect();
    let n = draws as f64;
    let (mut worst, mut failures) = (0.0f64, 0);
    for r in 0..10 {
        for o in 0..2 {
            let xs: Vec<f64> = values.iter().map(|v| v[2 * r + o]).collect();
            let m = xs.iter().sum::<f64>() / n;
            let sq: Vec<f64> = xs.iter().map(|x| (x - m).powi(2)).collect();
            let var = sq.iter().sum::<f64>() / (n - 1.0);
            let se_mean = (var / n).sqrt();
            let sq_mean = sq.iter().sum::<f64>() / n;
            let se_var = (sq.iter().map(|s| (s - sq_mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt();
            for z in [(m - mean[(r, o)]) / se_mean, (var - covs[o][(r, r)]) / se_var] {
                worst = worst.max(z.abs());
                failures += (z.abs() > 3.0) as usize;
            }
        }
    }
    Check::new(failures == 0, format!("{draws} draws, 40 statistics, worst |z| = {worst:.2}"))
}

/// Static Gaussian entropy: `K` values `x ~ N(0, τ²)` observed with noise `σ`.
pub fn static_gaussian_entropy(k: usize, tau: f64, sigma: f64, seed: u64) -> f64 {
    let mut rng = from_seed(seed);
    let trs: Vec<Trajectory> = (0..k)
        .map(|_| Trajectory {
            times: vec![1.0],
            x0: vec![0.0],
            states: vec![tau * rng.sample::<f64, _>(StandardNormal)],
            diverged: false,
        })
        .collect();
    let ys: Vec<Vec<f64>> = trs.iter().map(|t| vec![t.states[0] + sigma * rng.sample::<f64, _>(StandardNormal)]).collect();
    entropy_acquisition(&trs, &ys, &[sigma]).unwrap()
}

pub fn entropy_oracle() -> Check {
    let (tau, sigma) = (1.0, 0.5);
    let exact = 0.5 * (2.0 * PI * E * (tau * tau + sigma * sigma)).ln();
    let mut errs: Vec<f64> =
        (0..20).map(|s| (static_gaussian_entropy(4096, tau, sigma, s) - exact).abs() / exact).collect();
    errs.sort_by(f64::total_cmp);
    let median = 0.5 * (errs[9] + errs[10]);
    Check::new(median < 0.05, format!("median relative error {median:.4} over 20 seeds (exact {exact:.4})"))
}

fn linear(x: &[f64], out: &mut [f64]) {
    out[0] = x[0];
}

pub fn integrator_order() -> Check {
    let err = |cfg: IntegratorConfig| (integrate(linear, &[1.0], &[1.0], &cfg).unwrap().state(0)[0] - E).abs();
    let ratio = err(IntegratorConfig::rk4(0.1)) / err(IntegratorConfig::rk4(0.05));
    let rel = err(IntegratorConfig::dopri(1e-8, 1e-12)) / E;
    Check::new(
        (12.0..=20.0).contains(&ratio) && rel < 1e-6,
        format!("rk4 halving ratio {ratio:.2}, dopri45 relative error {rel:.2e}"),
    )
}

/// A model fitted to nothing but its initialization on one VdP episode.
pub fn vdp_model(seed: u64) -> (SystemSpec, GPODEModel) {
    let system = SystemSpec::by_name("vdp").unwrap();
    let ep = system.measure(&system.initial_state, &mut stream(seed, tags::MEASURE, 0)).unwrap();
    let model = GPODEModel::initialize(
        &[ep],
        &system.safety.lower,
        &system.safety.upper,
        vec![system.obs_noise; 2],
        &ModelInit::default(),
    )
    .unwrap();
    (system, model)
}

/// The planner picks the same candidate whether or not the constant
/// conditional entropy is subtracted.
pub fn argmax_invariance(instances: u64) -> Check {
    let (system, model) = vdp_model(0);
    let times = system.schedule();
    let config = PlannerConfig {
        n_candidates: 24,
        delta: 0.5,
        sampling: SamplingConfig { draws: 12, n_features: 64, ..SamplingConfig::default() },
        ..PlannerConfig::default()
    };
    let mut same = 0;
    for seed in 0..instances {
        let a = propose(&model, &system.safety, &times, &config, Acquisition::Entropy, seed);
        let b = propose(&model, &system.safety, &times, &config, Acquisition::MutualInformation, seed);
        if let (Ok(a), Ok(b)) = (a, b) {
            same += (a.theta == b.theta) as u64;
        }
    }
    Check::new(same == instances, format!("{same}/{instances} planning instances chose the same candidate"))
}

pub fn gram_psd() -> Check {
    let mut worst = f64::INFINITY;
    for seed in 0..5 {
        let mut rng = from_seed(seed);
        let kernel = RbfKernel::new(vec![rng.gen_range(0.2..3.0), rng.gen_range(0.2..3.0)], 2.0).unwrap();
        let x = DMatrix::from_fn(40, 2, |_, _| rng.gen_range(-3.0..3.0));
        let k = kernel.gram(&x, &x).unwrap();
        let symmetric = (&k - k.transpose()).amax() == 0.0;
        let min = k.symmetric_eigenvalues().min();
        worst = worst.min(if symmetric { min } else { f64::NEG_INFINITY });
    }
    Check::new(worst >= -1e-10, format!("smallest Gram eigenvalue {worst:.2e}"))
}

pub fn kl_sanity() -> Check {
    let (kernel, q) = random_posterior(3);
    let prior = InducingSet::prior(&kernel, q.inputs.clone(), 2).unwrap();
    let at_prior = kl_divergence(&prior, &kernel).unwrap();
    let mut least = f64::INFINITY;
    for seed in 0..10 {
        let (k, q) = random_posterior(seed);
        least = least.min(kl_divergence(&q, &k).unwrap());
    }
    Check::new(
        at_prior.abs() < 1e-6 && least > 0.0,
        format!("KL at prior {at_prior:.2e}, smallest over random posteriors {least:.3}"),
    )
}

pub fn serialization_round_trips() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = vdp_model(1);
    let path = dir.path().join("model.json");
    model.save(&path, 7, Some("vdp")).unwrap();
    let ck = GPODEModel::load(&path).unwrap();
    let model_ok = ck.model == model && ck.seed == 7 && ck.system.as_deref() == Some("vdp");

    let state = run_sal_loop(&tiny_config(1), 3, Acquisition::Entropy).unwrap();
    let state_path = dir.path().join("state.json");
    state.save(&state_path).unwrap();
    let state_ok = RunState::load(&state_path).unwrap() == state;

    let csv = dir.path().join("metrics.csv");
    write_metrics(&csv, &state.records).unwrap();
    let metrics_ok = read_metrics(&csv).unwrap() == state.records;

    let ep = &state.episodes[0];
    let ep_ok = serde_json::from_str::<Episode>(&serde_json::to_string(ep).unwrap()).unwrap() == *ep;
    Check::new(
        model_ok && state_ok && metrics_ok && ep_ok,
        format!("checkpoint {model_ok}, run state {state_ok}, metrics csv {metrics_ok}, episode {ep_ok}"),
    )
}

pub fn seeded_determinism() -> Check {
    let cfg = tiny_config(2);
    let a = run_sal_loop(&cfg, 11, Acquisition::Entropy).unwrap();
    let b = run_sal_loop(&cfg, 11, Acquisition::Entropy).unwrap();
    let same = a.records.len() == 3
        && a.records.iter().zip(&b.records).all(|(x, y)| x.same_outcome(y))
        && a.episodes == b.episodes
        && a.model == b.model;
    Check::new(same, format!("two 2-round runs with seed 11 agree: {same}"))
}
