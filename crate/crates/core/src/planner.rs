//! Safety-constrained maximization of the acquisition over candidate
//! initial states.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acquisition::{
    conditional_entropy_constant, covariance_acquisition, entropy_acquisition, safety_probability,
    SafetyBounds, SamplingConfig, Scalarization,
};
use crate::error::{check_dim, Error, Result};
use crate::integrator::Trajectory;
use crate::model::{sample_observations, DynamicsEnsemble, GPODEModel};
use crate::rng::{stream, tags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    #[default]
    RandomSearch,
    /// Random search followed by coordinate-wise hill climbing.
    RefineLocal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Acquisition {
    /// Marginal entropy of the predicted observations.
    #[default]
    Entropy,
    /// Entropy minus the (candidate-independent) noise entropy.
    MutualInformation,
    Covariance,
}

impl std::str::FromStr for Acquisition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entropy" => Ok(Self::Entropy),
            "mutual-information" => Ok(Self::MutualInformation),
            "covariance" => Ok(Self::Covariance),
            _ => Err(Error::Config(format!("unknown acquisition '{s}'"))),
        }
    }
}

impl std::fmt::Display for Acquisition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Entropy => "entropy",
            Self::MutualInformation => "mutual-information",
            Self::Covariance => "covariance",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    /// Candidate box Θ; the system's box when unset.
    pub domain: Option<SafetyBounds>,
    /// Required safety probability.
    pub delta: f64,
    pub n_candidates: usize,
    pub strategy: Strategy,
    /// Hill-climbing step as a fraction of the box width.
    pub refine_step: f64,
    pub refine_iterations: usize,
    pub scalarization: Scalarization,
    pub sampling: SamplingConfig,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            domain: None,
            delta: 0.9,
            n_candidates: 64,
            strategy: Strategy::RandomSearch,
            refine_step: 0.05,
            refine_iterations: 20,
            scalarization: Scalarization::Trace,
            sampling: SamplingConfig::default(),
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta must lie in [0, 1), got {}", self.delta)));
        }
        if self.n_candidates == 0 {
            return Err(Error::Config("n_candidates must be at least 1".into()));
        }
        if !(self.refine_step > 0.0 && self.refine_step < 1.0) {
            return Err(Error::Config(format!("refine_step must lie in (0, 1), got {}", self.refine_step)));
        }
        if let Some(b) = &self.domain {
            SafetyBounds::new(b.lower.clone(), b.upper.clone())?;
            if !b.lower.iter().chain(&b.upper).all(|v| v.is_finite()) {
                return Err(Error::Config("candidate box must be finite".into()));
            }
        }
        self.sampling.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub theta: Vec<f64>,
    /// `−∞` when fewer than two sampled trajectories survived integration.
    pub acquisition: f64,
    pub xi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub theta: Vec<f64>,
    pub acquisition: f64,
    pub xi: f64,
    pub evaluated: Vec<CandidateScore>,
}

/// Uniform draw from the box.
pub fn random_baseline_propose<R: Rng + ?Sized>(domain: &SafetyBounds, rng: &mut R) -> Vec<f64> {
    domain.lower.iter().zip(&domain.upper).map(|(a, b)| rng.gen_range(*a..=*b)).collect()
}

/// Scores candidates against one shared set of posterior draws, with the same
/// initial-state and observation noise for every candidate (common random
/// numbers), so score differences come from the model alone.
pub struct CandidateScorer<'a> {
    model: &'a GPODEModel,
    ensemble: DynamicsEnsemble,
    safety: &'a SafetyBounds,
    times: &'a [f64],
    config: &'a PlannerConfig,
    acquisition: Acquisition,
    seed: u64,
}

impl<'a> CandidateScorer<'a> {
    pub fn new(
        model: &'a GPODEModel,
        safety: &'a SafetyBounds,
        times: &'a [f64],
        config: &'a PlannerConfig,
        acquisition: Acquisition,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        check_dim(model.dim(), safety.dim())?;
        let min_draws = if config.delta > 0.0 || acquisition != Acquisition::Covariance { 2 } else { 1 };
        if config.sampling.draws < min_draws {
            return Err(Error::Config("acquisition needs at least two draws".into()));
        }
        let ensemble = DynamicsEnsemble::sample(model, config.sampling.draws, config.sampling.n_features, seed)?;
        Ok(Self { model, ensemble, safety, times, config, acquisition, seed })
    }

    /// Sampled trajectories started at `theta`.
    pub fn trajectories(&self, theta: &[f64]) -> Result<Vec<Trajectory>> {
        let mut rng = stream(self.seed, tags::OBS_NOISE, 0);
        let noise = if self.config.sampling.include_x0_noise { Some(&mut rng) } else { None };
        self.ensemble.rollout(theta, self.times, &self.config.sampling.integrator, noise)
    }

    pub fn score(&self, theta: &[f64]) -> Result<CandidateScore> {
        let trs = self.trajectories(theta)?;
        let xi = safety_probability(&trs, self.safety)?;
        let ok: Vec<Trajectory> = trs.into_iter().filter(|t| !t.diverged).collect();
        let acquisition = if ok.len() < 2 {
            f64::NEG_INFINITY
        } else {
            self.acquisition_value(&ok)?
        };
        Ok(CandidateScore { theta: theta.to_vec(), acquisition, xi })
    }

    fn acquisition_value(&self, trs: &[Trajectory]) -> Result<f64> {
        let sigma = &self.model.obs_noise;
        Ok(match self.acquisition {
            Acquisition::Entropy | Acquisition::MutualInformation => {
                let mut rng = stream(self.seed, tags::CANDIDATE, 0);
                let ys = sample_observations(trs, sigma, &mut rng);
                let h = entropy_acquisition(trs, &ys, sigma)?;
                if self.acquisition == Acquisition::MutualInformation {
                    h - conditional_entropy_constant(sigma, self.times.len())
                } else {
                    h
                }
            }
            Acquisition::Covariance => covariance_acquisition(trs, self.config.scalarization)?,
        })
    }

    pub fn score_all(&self, thetas: &[Vec<f64>]) -> Result<Vec<CandidateScore>> {
        thetas.par_iter().map(|t| self.score(t)).collect()
    }
}

fn candidate_positions(domain: &SafetyBounds, seed: u64, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
    range
        .map(|i| random_baseline_propose(domain, &mut stream(seed, tags::PLAN, i as u64)))
        .collect()
}

fn is_feasible(c: &CandidateScore, delta: f64) -> bool {
    c.xi >= delta && c.acquisition > f64::NEG_INFINITY
}

/// First feasible candidate with the largest acquisition.
fn best_feasible(scores: &[CandidateScore], delta: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, c) in scores.iter().enumerate() {
        if is_feasible(c, delta) && best.map_or(true, |b| c.acquisition > scores[b].acquisition) {
            best = Some(i);
        }
    }
    best
}

fn no_feasible(scores: &[CandidateScore]) -> Error {
    let best = scores.iter().enumerate().fold(0, |b, (i, c)| if c.xi > scores[b].xi { i } else { b });
    Error::NoFeasibleCandidate { best_theta: scores[best].theta.clone(), best_xi: scores[best].xi }
}

/// Choose the next initial state: maximize the acquisition subject to the
/// estimated safety probability being at least `δ`. Deterministic in `seed`.
pub fn propose(
    model: &GPODEModel,
    safety: &SafetyBounds,
    times: &[f64],
    config: &PlannerConfig,
    acquisition: Acquisition,
    seed: u64,
) -> Result<PlanResult> {
    let domain = config.domain.clone().unwrap_or_else(|| safety.clone());
    check_dim(model.dim(), domain.dim())?;
    let scorer = CandidateScorer::new(model, safety, times, config, acquisition, seed)?;
    let thetas = candidate_positions(&domain, seed, 0..config.n_candidates);
    let mut evaluated = scorer.score_all(&thetas)?;
    let Some(mut best) = best_feasible(&evaluated, config.delta) else {
        return Err(no_feasible(&evaluated));
    };

    if config.strategy == Strategy::RefineLocal {
        let steps: Vec<f64> = domain.lower.iter().zip(&domain.upper).map(|(a, b)| config.refine_step * (b - a)).collect();
        for _ in 0..config.refine_iterations {
            let centre = evaluated[best].theta.clone();
            let moves: Vec<Vec<f64>> = (0..centre.len())
                .flat_map(|k| [-1.0, 1.0].map(|s| (k, s)))
                .map(|(k, s)| {
                    let mut t = centre.clone();
                    t[k] = (t[k] + s * steps[k]).clamp(domain.lower[k], domain.upper[k]);
                    t
                })
                .filter(|t| *t != centre)
                .collect();
            let scored = scorer.score_all(&moves)?;
            let offset = evaluated.len();
            evaluated.extend(scored);
            let improved = (offset..evaluated.len())
                .filter(|&i| is_feasible(&evaluated[i], config.delta))
                .fold(best, |b, i| if evaluated[i].acquisition > evaluated[b].acquisition { i } else { b });
            if improved == best {
                break;
            }
            best = improved;
        }
    }

    let chosen = &evaluated[best];
    Ok(PlanResult { theta: chosen.theta.clone(), acquisition: chosen.acquisition, xi: chosen.xi, evaluated })
}

/// Uniform candidates screened by the model: the first one whose estimated
/// safety probability reaches `δ`.
pub fn safe_random_propose(
    model: &GPODEModel,
    safety: &SafetyBounds,
    times: &[f64],
    config: &PlannerConfig,
    seed: u64,
) -> Result<PlanResult> {
    let domain = config.domain.clone().unwrap_or_else(|| safety.clone());
    let scorer = CandidateScorer::new(model, safety, times, config, Acquisition::Covariance, seed)?;
    let thetas = candidate_positions(&domain, seed, 0..config.n_candidates);
    let evaluated = scorer.score_all(&thetas)?;
    match evaluated.iter().position(|c| c.xi >= config.delta) {
        Some(i) => {
            let c = &evaluated[i];
            Ok(PlanResult { theta: c.theta.clone(), acquisition: c.acquisition, xi: c.xi, evaluated: evaluated.clone() })
        }
        None => Err(no_feasible(&evaluated)),
    }
}
