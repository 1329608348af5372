//! The measure–train–plan loop, the random baseline loop, experiment
//! configuration and run persistence.

mod metrics;
mod state;

pub use metrics::{
    aggregate, box_grid, f1_safe_set, f1_score, mean_std, predicted_safe_set, read_metrics, validation_episodes,
    validation_nll, write_metrics, write_summary, MetricsConfig, MetricsRecord, SummaryRow, METRICS_HEADER,
    NLL_CAP, SUMMARY_HEADER,
};
pub use state::{Acquired, RunState, RUN_STATE_SCHEMA_VERSION};

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::acquisition::SafetyBounds;
use crate::error::{Error, Result};
use crate::model::{train, Episode, GPODEModel, ModelInit, TrainConfig};
use crate::planner::{propose, random_baseline_propose, safe_random_propose, Acquisition, PlanResult, PlannerConfig};
use crate::rng::{derive, stream, tags};
use crate::systems::SystemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Sal,
    Random,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Sal => "sal",
            Method::Random => "random",
        })
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sal" => Ok(Method::Sal),
            "random" => Ok(Method::Random),
            _ => Err(Error::Config(format!("unknown method '{s}'"))),
        }
    }
}

/// Replacements for a registered system's experimental constants.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemOverrides {
    pub horizon: Option<f64>,
    pub n_obs: Option<usize>,
    pub obs_noise: Option<f64>,
    pub safety: Option<SafetyBounds>,
    pub domain: Option<SafetyBounds>,
    pub initial_state: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: String,
    pub overrides: SystemOverrides,
    /// Number of new measurements `M`.
    pub budget: usize,
    pub seeds: Vec<u64>,
    pub method: Method,
    pub acquisition: Acquisition,
    /// Screen baseline draws with the model's safety estimate.
    pub safe_random: bool,
    pub planner: PlannerConfig,
    pub train: TrainConfig,
    pub model: ModelInit,
    pub metrics: MetricsConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: "vdp".into(),
            overrides: SystemOverrides::default(),
            budget: 8,
            seeds: vec![0],
            method: Method::Sal,
            acquisition: Acquisition::Entropy,
            safe_random: false,
            planner: PlannerConfig::default(),
            train: TrainConfig::default(),
            model: ModelInit::default(),
            metrics: MetricsConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn system_spec(&self) -> Result<SystemSpec> {
        let mut s = SystemSpec::by_name(&self.system)?;
        let o = &self.overrides;
        if let Some(v) = o.horizon {
            s.horizon = v;
        }
        if let Some(v) = o.n_obs {
            s.n_obs = v;
        }
        if let Some(v) = o.obs_noise {
            s.obs_noise = v;
        }
        if let Some(v) = &o.safety {
            s.safety = v.clone();
        }
        if let Some(v) = &o.domain {
            s.domain = v.clone();
        }
        if let Some(v) = &o.initial_state {
            s.initial_state = v.clone();
        }
        s.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let config = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.budget == 0 {
            return Err(Error::Config("budget must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let s = self.system_spec()?;
        if s.dim() != 2 {
            return Err(Error::Config("the metrics schema records two-dimensional initial states".into()));
        }
        if !s.domain.contains(&s.initial_state) {
            return Err(Error::Config("initial state lies outside the candidate box".into()));
        }
        self.planner.validate().map_err(config)?;
        self.train.validate().map_err(config)?;
        self.metrics.validate().map_err(config)?;
        if self.model.num_inducing == 0 || !(self.model.lengthscale_fraction > 0.0) {
            return Err(Error::Config("model needs inducing inputs and a positive lengthscale fraction".into()));
        }
        Ok(())
    }

    /// Directory name for one method/acquisition combination.
    pub fn label(&self, method: Method, acquisition: Acquisition) -> String {
        match method {
            Method::Sal => format!("{}-sal-{acquisition}", self.system),
            Method::Random if self.safe_random => format!("{}-safe-random", self.system),
            Method::Random => format!("{}-random", self.system),
        }
    }
}

/// Everything about an experiment that is fixed for a given seed.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub system: SystemSpec,
    pub validation: Vec<Episode>,
    pub f1_grid: Vec<Vec<f64>>,
    pub truth: Vec<bool>,
}

impl Experiment {
    pub fn new(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let system = config.system_spec()?;
        let validation = validation_episodes(&system, &config.metrics, seed)?;
        let f1_grid = box_grid(&system.domain, config.metrics.f1_grid);
        let truth = f1_grid.iter().map(|x| system.is_truly_safe(x)).collect();
        Ok(Self { config: config.clone(), system, validation, f1_grid, truth })
    }

    fn planner_config(&self) -> PlannerConfig {
        let mut p = self.config.planner.clone();
        p.domain.get_or_insert_with(|| self.system.domain.clone());
        p
    }

    /// Inducing inputs tile the safety box where it is finite, the candidate
    /// box elsewhere.
    fn inducing_box(&self) -> (Vec<f64>, Vec<f64>) {
        let (s, c) = (&self.system.safety, &self.system.domain);
        (0..self.system.dim())
            .map(|k| {
                if s.lower[k].is_finite() && s.upper[k].is_finite() {
                    (s.lower[k], s.upper[k])
                } else {
                    (c.lower[k], c.upper[k])
                }
            })
            .unzip()
    }

    /// Initialize from the data and train. A non-finite objective falls back
    /// to the untrained initialization; the flag reports that.
    pub fn fit(&self, data: &[Episode], seed: u64) -> Result<(GPODEModel, bool)> {
        let (lo, hi) = self.inducing_box();
        let noise = vec![self.system.obs_noise.max(1e-3); self.system.dim()];
        let init = GPODEModel::initialize(data, &lo, &hi, noise, &self.config.model)?;
        let cfg = TrainConfig { seed, ..self.config.train.clone() };
        match train(&init, data, &cfg) {
            Ok(out) => Ok((out.model, false)),
            Err(Error::NonFiniteObjective { .. }) => Ok((init, true)),
            Err(e) => Err(e),
        }
    }

    /// Validation NLL and safe-set F1.
    pub fn evaluate(&self, model: &GPODEModel, seed: u64) -> Result<(f64, f64)> {
        let m = &self.config.metrics;
        let nll = validation_nll(model, &self.validation, m.nll_draws, m.n_features, &m.integrator, derive(seed, tags::VALIDATION, 0))?;
        let f1 = f1_safe_set(
            model,
            &self.system,
            &self.f1_grid,
            &self.truth,
            self.config.planner.delta,
            &m.f1_sampling(),
            derive(seed, tags::METRICS, 0),
        )?;
        Ok((nll, f1))
    }

    /// Fresh state holding only the seed episode.
    pub fn start(&self, seed: u64, method: Method, acquisition: Acquisition) -> Result<RunState> {
        let x0 = self.system.initial_state.clone();
        let first = self.system.measure(&x0, &mut stream(seed, tags::MEASURE, 0))?;
        Ok(RunState {
            schema_version: RUN_STATE_SCHEMA_VERSION,
            config: self.config.clone(),
            seed,
            method,
            acquisition: (method == Method::Sal).then_some(acquisition),
            next_round: 0,
            episodes: vec![first],
            records: Vec::new(),
            pending: Acquired { theta: Some(x0.clone()), xi: None, truly_safe: Some(self.system.is_truly_safe(&x0)) },
            skipped_rounds: 0,
            failed_measurements: 0,
            training_failures: 0,
            elapsed_seconds: 0.0,
            model: None,
        })
    }

    fn plan(&self, model: &GPODEModel, state: &RunState, round: usize) -> Result<Option<PlanResult>> {
        let cfg = self.planner_config();
        let times = self.system.schedule();
        let seed = derive(state.seed, tags::PLAN, round as u64);
        let attempt = |cfg: &PlannerConfig, seed: u64| match (state.method, state.acquisition) {
            (Method::Sal, Some(acq)) => propose(model, &self.system.safety, &times, cfg, acq, seed),
            _ => safe_random_propose(model, &self.system.safety, &times, cfg, seed),
        };
        match attempt(&cfg, seed) {
            Err(Error::NoFeasibleCandidate { .. }) => {
                let wide = PlannerConfig { n_candidates: 4 * cfg.n_candidates, ..cfg.clone() };
                match attempt(&wide, derive(seed, tags::REFINE, 1)) {
                    Ok(p) => Ok(Some(p)),
                    Err(Error::NoFeasibleCandidate { .. }) => Ok(None),
                    Err(e) => Err(e),
                }
            }
            other => other.map(Some),
        }
    }

    /// Train on the current data, record metrics for `next_round`, then (if
    /// budget remains) choose and measure the next initial state.
    pub fn step(&self, state: &mut RunState) -> Result<()> {
        if state.is_finished() {
            return Ok(());
        }
        let clock = Instant::now();
        let round = state.next_round;
        let seed = state.seed;
        let (model, failed) = self.fit(&state.episodes, derive(seed, tags::TRAIN, round as u64))?;
        state.training_failures += failed as usize;
        let (nll, f1) = self.evaluate(&model, derive(seed, tags::METRICS, round as u64))?;

        let mut next = Acquired::default();
        if round < self.config.budget {
            let theta = match state.method {
                Method::Random if !self.config.safe_random => Some((
                    random_baseline_propose(&self.system.domain, &mut stream(seed, tags::BASELINE, round as u64)),
                    None,
                )),
                _ => self.plan(&model, state, round)?.map(|p| (p.theta, Some(p.xi))),
            };
            match theta {
                None => state.skipped_rounds += 1,
                Some((theta, xi)) => {
                    match self.system.measure(&theta, &mut stream(seed, tags::MEASURE, round as u64 + 1)) {
                        Ok(ep) => state.episodes.push(ep),
                        Err(Error::MeasurementFailed { .. }) => state.failed_measurements += 1,
                        Err(e) => return Err(e),
                    }
                    next = Acquired { truly_safe: Some(self.system.is_truly_safe(&theta)), theta: Some(theta), xi };
                }
            }
        }

        state.elapsed_seconds += clock.elapsed().as_secs_f64();
        let acquired = std::mem::replace(&mut state.pending, next);
        let theta = acquired.theta.unwrap_or_default();
        state.records.push(MetricsRecord {
            seed,
            budget: round,
            method: state.method,
            acquisition: state.acquisition,
            nll,
            f1,
            theta_0: theta.first().copied(),
            theta_1: theta.get(1).copied(),
            xi_est: acquired.xi,
            truly_safe: acquired.truly_safe,
            seconds: state.elapsed_seconds,
        });
        state.model = Some(model);
        state.next_round += 1;
        Ok(())
    }

    /// Step until finished or until `stop_before` rounds have been recorded,
    /// calling `after_round` after each round.
    pub fn run(
        &self,
        mut state: RunState,
        stop_before: Option<usize>,
        mut after_round: impl FnMut(&RunState) -> Result<()>,
    ) -> Result<RunState> {
        while !state.is_finished() && stop_before.map_or(true, |s| state.next_round < s) {
            self.step(&mut state)?;
            after_round(&state)?;
        }
        Ok(state)
    }
}

pub fn run_sal_loop(config: &ExperimentConfig, seed: u64, acquisition: Acquisition) -> Result<RunState> {
    let exp = Experiment::new(config, seed)?;
    exp.run(exp.start(seed, Method::Sal, acquisition)?, None, |_| Ok(()))
}

pub fn run_random_loop(config: &ExperimentConfig, seed: u64) -> Result<RunState> {
    let exp = Experiment::new(config, seed)?;
    exp.run(exp.start(seed, Method::Random, config.acquisition)?, None, |_| Ok(()))
}

pub const STATE_FILE: &str = "state.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";

/// Run one seed, persisting state, the latest model and the metrics after
/// every round. With `resume`, an unfinished state in `dir` is continued.
pub fn run_to_dir(
    config: &ExperimentConfig,
    method: Method,
    acquisition: Acquisition,
    seed: u64,
    dir: &Path,
    resume: bool,
) -> Result<RunState> {
    std::fs::create_dir_all(dir)?;
    let exp = Experiment::new(config, seed)?;
    let state_path = dir.join(STATE_FILE);
    let state = if resume && state_path.exists() {
        let s = RunState::load(&state_path)?;
        if s.config != *config || s.seed != seed || s.method != method || s.acquisition.is_some_and(|a| a != acquisition) {
            return Err(Error::Config(format!("{} was produced by a different configuration", state_path.display())));
        }
        s
    } else {
        exp.start(seed, method, acquisition)?
    };
    exp.run(state, None, |s| {
        s.save(&state_path)?;
        if let Some(m) = &s.model {
            m.save(&dir.join(CHECKPOINT_FILE), seed, Some(&config.system))?;
        }
        write_metrics(&dir.join(METRICS_FILE), &s.records)
    })
}

/// Every `*.csv` file under `dir`, in sorted order.
pub fn find_metric_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Cap the worker pool at `SALGPODE_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("SALGPODE_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Config(format!("SALGPODE_THREADS must be a positive integer, got '{v}'")))?;
    // A pool that already exists keeps its size.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
