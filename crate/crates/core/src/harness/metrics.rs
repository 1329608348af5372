//! Per-round metrics, their CSV form, and cross-seed aggregation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Method;
use crate::acquisition::{gaussian_log_density, SafetyBounds, SamplingConfig};
use crate::error::{Error, Result};
use crate::integrator::IntegratorConfig;
use crate::model::{DynamicsEnsemble, Episode, GPODEModel};
use crate::planner::Acquisition;
use crate::rng::{stream, tags, SeededRng};
use crate::systems::SystemSpec;

pub const METRICS_HEADER: &str = "seed,budget,method,acquisition,nll,f1,theta_0,theta_1,xi_est,truly_safe,seconds";
pub const SUMMARY_HEADER: &str =
    "method,acquisition,budget,seeds,nll_mean,nll_std,nll_lower,nll_upper,f1_mean,f1_std,f1_lower,f1_upper";

/// Per-entry NLL recorded when every sampled trajectory diverged.
pub const NLL_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub seed: u64,
    pub budget: usize,
    pub method: Method,
    /// Empty for the random baseline.
    pub acquisition: Option<Acquisition>,
    pub nll: f64,
    pub f1: f64,
    pub theta_0: Option<f64>,
    pub theta_1: Option<f64>,
    pub xi_est: Option<f64>,
    pub truly_safe: Option<bool>,
    pub seconds: f64,
}

impl MetricsRecord {
    /// Equality ignoring wall-clock time.
    pub fn same_outcome(&self, other: &Self) -> bool {
        Self { seconds: 0.0, ..self.clone() } == Self { seconds: 0.0, ..other.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Held-out validation episodes.
    pub validation_points: usize,
    /// Points per side of the grid the validation starts are picked from.
    pub validation_grid: usize,
    pub nll_draws: usize,
    /// Points per side of the F1 grid over the candidate box.
    pub f1_grid: usize,
    pub f1_draws: usize,
    pub n_features: usize,
    pub include_x0_noise: bool,
    pub integrator: IntegratorConfig,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            validation_points: 20,
            validation_grid: 10,
            nll_draws: 256,
            f1_grid: 15,
            f1_draws: 256,
            n_features: 256,
            include_x0_noise: true,
            integrator: IntegratorConfig::dopri(1e-4, 1e-6),
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.validation_points == 0 || self.validation_grid == 0 || self.f1_grid == 0 {
            return Err(Error::Config("metric grids and validation set must be nonempty".into()));
        }
        if self.nll_draws == 0 || self.f1_draws == 0 || self.n_features == 0 {
            return Err(Error::Config("metric sample counts must be at least 1".into()));
        }
        self.integrator.validate()
    }

    pub fn f1_sampling(&self) -> SamplingConfig {
        SamplingConfig {
            draws: self.f1_draws,
            include_x0_noise: self.include_x0_noise,
            seed: 0,
            n_features: self.n_features,
            integrator: self.integrator.clone(),
        }
    }
}

/// `g` points per side of the box, edges included (the centre when `g = 1`).
pub fn box_grid(domain: &SafetyBounds, g: usize) -> Vec<Vec<f64>> {
    let axis = |k: usize| -> Vec<f64> {
        let (a, b) = (domain.lower[k], domain.upper[k]);
        if g == 1 {
            vec![0.5 * (a + b)]
        } else {
            (0..g).map(|i| a + (b - a) * i as f64 / (g - 1) as f64).collect()
        }
    };
    let mut points = vec![Vec::new()];
    for k in 0..domain.dim() {
        let ax = axis(k);
        points = points
            .into_iter()
            .flat_map(|p| ax.iter().map(move |v| [p.clone(), vec![*v]].concat()))
            .collect();
    }
    points
}

/// Held-out episodes from truly-safe starts on a grid over the candidate box,
/// spread evenly over the safe grid points.
pub fn validation_episodes(system: &SystemSpec, config: &MetricsConfig, seed: u64) -> Result<Vec<Episode>> {
    let safe: Vec<Vec<f64>> = box_grid(&system.domain, config.validation_grid)
        .into_iter()
        .filter(|x| system.is_truly_safe(x))
        .collect();
    if safe.is_empty() {
        return Err(Error::Config(format!("no truly safe start on the validation grid of '{}'", system.name)));
    }
    let count = config.validation_points.min(safe.len());
    (0..count)
        .map(|i| {
            let x0 = &safe[i * safe.len() / count];
            system.measure(x0, &mut stream(seed, tags::VALIDATION, i as u64))
        })
        .collect()
}

/// Per-entry mixture NLL of one episode under sampled trajectories.
fn episode_nll(model: &GPODEModel, ensemble: &DynamicsEnsemble, episode: &Episode, integrator: &IntegratorConfig) -> Result<f64> {
    let entries = episode.observations.len() as f64;
    let trs = ensemble.rollout::<SeededRng>(&episode.initial_choice, &episode.times, integrator, None)?;
    let logs: Vec<f64> = trs
        .iter()
        .filter(|t| !t.diverged)
        .map(|t| gaussian_log_density(&episode.observations, &t.states, &model.obs_noise))
        .collect();
    if logs.is_empty() {
        return Ok(NLL_CAP / entries);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lme = max + (logs.iter().map(|v| (v - max).exp()).sum::<f64>() / logs.len() as f64).ln();
    Ok(-lme / entries)
}

/// Mean over episodes of the per-entry mixture negative log likelihood, with
/// `k` posterior draws started at each episode's true initial state.
pub fn validation_nll(
    model: &GPODEModel,
    episodes: &[Episode],
    k: usize,
    n_features: usize,
    integrator: &IntegratorConfig,
    seed: u64,
) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::Contract("validation set is empty".into()));
    }
    let ensemble = DynamicsEnsemble::sample(model, k, n_features, seed)?;
    let per: Vec<f64> = episodes
        .par_iter()
        .map(|e| episode_nll(model, &ensemble, e, integrator))
        .collect::<Result<_>>()?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// F1 with "safe" as the positive class; 1 when there are no positives,
/// false positives or false negatives at all.
pub fn f1_score(predicted: &[bool], truth: &[bool]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Model-predicted safety (`ξ ≥ δ`) on `grid`.
pub fn predicted_safe_set(
    model: &GPODEModel,
    system: &SystemSpec,
    grid: &[Vec<f64>],
    delta: f64,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<Vec<bool>> {
    let ensemble = DynamicsEnsemble::sample(model, sampling.draws, sampling.n_features, seed)?;
    let times = system.schedule();
    grid.par_iter()
        .enumerate()
        .map(|(i, x0)| {
            let mut rng = stream(seed, tags::METRICS, i as u64);
            let noise = if sampling.include_x0_noise { Some(&mut rng) } else { None };
            ensemble.meets_fraction(x0, &times, &sampling.integrator, noise, delta, |x| system.safety.contains(x))
        })
        .collect()
}

pub fn f1_safe_set(
    model: &GPODEModel,
    system: &SystemSpec,
    grid: &[Vec<f64>],
    truth: &[bool],
    delta: f64,
    sampling: &SamplingConfig,
    seed: u64,
) -> Result<f64> {
    if grid.len() != truth.len() {
        return Err(Error::Contract("grid and truth labels differ in length".into()));
    }
    Ok(f1_score(&predicted_safe_set(model, system, grid, delta, sampling, seed)?, truth))
}

pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(METRICS_HEADER.split(','))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers().map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    let found = header.iter().collect::<Vec<_>>().join(",");
    if found != METRICS_HEADER {
        return Err(Error::Schema(format!("{}: expected header '{METRICS_HEADER}', found '{found}'", path.display())));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Schema(format!("{}: {e}", path.display()))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: Method,
    pub acquisition: Option<Acquisition>,
    pub budget: usize,
    pub seeds: usize,
    pub nll_mean: f64,
    pub nll_std: f64,
    pub nll_lower: f64,
    pub nll_upper: f64,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub f1_lower: f64,
    pub f1_upper: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per (method, acquisition, budget): mean, sample std and mean ± 2 std of
/// NLL and F1 across seeds. Values are summed in seed order so the result
/// does not depend on row order.
pub fn aggregate(records: &[MetricsRecord]) -> Result<Vec<SummaryRow>> {
    if records.is_empty() {
        return Err(Error::Schema("no metrics records to aggregate".into()));
    }
    type Key = (String, String, usize);
    let mut groups: BTreeMap<Key, (Method, Option<Acquisition>, BTreeMap<u64, (f64, f64)>)> = BTreeMap::new();
    for r in records {
        let key = (r.method.to_string(), r.acquisition.map(|a| a.to_string()).unwrap_or_default(), r.budget);
        let entry = groups.entry(key).or_insert_with(|| (r.method, r.acquisition, BTreeMap::new()));
        if entry.2.insert(r.seed, (r.nll, r.f1)).is_some() {
            return Err(Error::Schema(format!(
                "duplicate record for seed {} budget {} method {}",
                r.seed, r.budget, r.method
            )));
        }
    }
    Ok(groups
        .into_iter()
        .map(|((_, _, budget), (method, acquisition, by_seed))| {
            let nll: Vec<f64> = by_seed.values().map(|v| v.0).collect();
            let f1: Vec<f64> = by_seed.values().map(|v| v.1).collect();
            let (nm, ns) = mean_std(&nll);
            let (fm, fs) = mean_std(&f1);
            SummaryRow {
                method,
                acquisition,
                budget,
                seeds: nll.len(),
                nll_mean: nm,
                nll_std: ns,
                nll_lower: nm - 2.0 * ns,
                nll_upper: nm + 2.0 * ns,
                f1_mean: fm,
                f1_std: fs,
                f1_lower: fm - 2.0 * fs,
                f1_upper: fm + 2.0 * fs,
            }
        })
        .collect())
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(SUMMARY_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn record(seed: u64, budget: usize, nll: f64, f1: f64) -> MetricsRecord {
        MetricsRecord {
            seed,
            budget,
            method: Method::Sal,
            acquisition: Some(Acquisition::Entropy),
            nll,
            f1,
            theta_0: Some(0.5),
            theta_1: Some(-1.0),
            xi_est: Some(0.95),
            truly_safe: Some(true),
            seconds: 1.25,
        }
    }

    #[test]
    fn f1_conventions() {
        assert_eq!(f1_score(&[true, false, true], &[true, false, true]), 1.0);
        let p = [true, true, true, false];
        let t = [true, true, false, true];
        assert_relative_eq!(f1_score(&p, &t), 4.0 / 6.0);
        assert_eq!(f1_score(&[false, false], &[true, false]), 0.0);
        assert_eq!(f1_score(&[false, false], &[false, false]), 1.0);
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let rows = aggregate(&[record(0, 1, 1.0, 0.5), record(1, 1, 3.0, 0.5)]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_relative_eq!(rows[0].nll_mean, 2.0);
        assert_relative_eq!(rows[0].nll_std, 2f64.sqrt());
        assert_relative_eq!(rows[0].nll_upper, 2.0 + 2.0 * 2f64.sqrt());
        assert_eq!(rows[0].f1_std, 0.0);
        let single = aggregate(&[record(4, 0, 1.5, 0.2)]).unwrap();
        assert_eq!(single[0].nll_std, 0.0);
        assert_eq!(single[0].nll_lower, single[0].nll_upper);
    }

    #[test]
    fn aggregate_ignores_row_order_and_rejects_duplicates() {
        let rs = vec![record(0, 0, 1.1, 0.3), record(1, 0, 2.3, 0.9), record(2, 0, 0.7, 0.4), record(0, 1, 5.0, 1.0)];
        let mut rev = rs.clone();
        rev.reverse();
        assert_eq!(aggregate(&rs).unwrap(), aggregate(&rev).unwrap());
        assert!(matches!(aggregate(&[record(0, 0, 1.0, 1.0), record(0, 0, 2.0, 1.0)]), Err(Error::Schema(_))));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut rs = vec![record(0, 0, 1.0, 0.5), record(0, 1, 0.8, 0.75)];
        rs[1].method = Method::Random;
        rs[1].acquisition = None;
        rs[1].xi_est = None;
        rs[1].truly_safe = Some(false);
        write_metrics(&path, &rs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRICS_HEADER);
        assert!(text.lines().nth(2).unwrap().starts_with("0,1,random,,0.8,0.75,"));
        assert_eq!(read_metrics(&path).unwrap(), rs);
    }

    #[test]
    fn schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(read_metrics(&empty), Err(Error::Schema(_))));
        let wrong = dir.path().join("wrong.csv");
        std::fs::write(&wrong, "seed,budget,nll\n0,0,1.0\n").unwrap();
        assert!(matches!(read_metrics(&wrong), Err(Error::Schema(_))));
        let bad = dir.path().join("bad.csv");
        std::fs::write(&bad, format!("{METRICS_HEADER}\n0,zero,sal,entropy,1,1,0,0,1,true,0\n")).unwrap();
        assert!(matches!(read_metrics(&bad), Err(Error::Schema(_))));
    }

    #[test]
    fn grid_shape() {
        let b = SafetyBounds::new(vec![-4.0, 1.0], vec![4.0, 15.0]).unwrap();
        let g = box_grid(&b, 15);
        assert_eq!(g.len(), 225);
        assert_eq!(g[0], vec![-4.0, 1.0]);
        assert_eq!(g[224], vec![4.0, 15.0]);
        assert_eq!(box_grid(&b, 1), vec![vec![0.0, 8.0]]);
    }

    #[test]
    fn episode_nll_at_the_mean() {
        // One draw reproducing the observations exactly: ½ log(2π) per entry at σ = 1.
        use crate::model::tests::zero_field_model;
        let mut m = zero_field_model(1);
        m.obs_noise = vec![1.0];
        let ens = DynamicsEnsemble::sample(&m, 1, 16, 0).unwrap();
        let ep = Episode::new(vec![0.3], vec![0.5, 1.0, 1.5], vec![0.3, 0.3, 0.3]).unwrap();
        let nll = episode_nll(&m, &ens, &ep, &IntegratorConfig::default()).unwrap();
        assert_relative_eq!(nll, 0.5 * (2.0 * std::f64::consts::PI).ln(), epsilon = 1e-6);
    }

    #[test]
    fn nll_is_order_invariant() {
        use crate::model::tests::zero_field_model;
        let m = zero_field_model(1);
        let eps: Vec<Episode> = (0..4)
            .map(|i| Episode::new(vec![i as f64 * 0.1], vec![1.0], vec![i as f64 * 0.1 + 0.05]).unwrap())
            .collect();
        let mut rev = eps.clone();
        rev.reverse();
        let cfg = IntegratorConfig::default();
        let a = validation_nll(&m, &eps, 8, 16, &cfg, 1).unwrap();
        let b = validation_nll(&m, &rev, 8, 16, &cfg, 1).unwrap();
        assert_relative_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn outcome_comparison_ignores_time() {
        let a = record(0, 0, 1.0, 1.0);
        let b = MetricsRecord { seconds: 99.0, ..a.clone() };
        assert!(a.same_outcome(&b));
        assert!(!a.same_outcome(&MetricsRecord { nll: 1.5, ..a.clone() }));
    }
}
