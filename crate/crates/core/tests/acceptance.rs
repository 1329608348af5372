//! One PASS/FAIL line per acceptance criterion. Learning-curve runs are
//! written under `SALGPODE_ACCEPTANCE_DIR` when set (finished runs are reused)
//! and to a temporary directory otherwise.

mod common;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use salgpode::acquisition::SamplingConfig;
use salgpode::harness::{run_to_dir, ExperimentConfig, MetricsConfig, MetricsRecord, Method};
use salgpode::planner::{Acquisition, PlannerConfig};

use common::Check;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const BUDGET: usize = 8;

fn config(system: &str) -> ExperimentConfig {
    ExperimentConfig {
        system: system.into(),
        budget: BUDGET,
        seeds: SEEDS.to_vec(),
        planner: PlannerConfig {
            n_candidates: 32,
            sampling: SamplingConfig { draws: 16, ..SamplingConfig::default() },
            ..PlannerConfig::default()
        },
        metrics: MetricsConfig { validation_points: 10, nll_draws: 32, f1_grid: 12, f1_draws: 32, ..MetricsConfig::default() },
        ..ExperimentConfig::default()
    }
}

struct Curves {
    sal: Vec<Vec<MetricsRecord>>,
    random: Vec<Vec<MetricsRecord>>,
    minutes: f64,
}

fn curves(root: &std::path::Path, system: &str) -> Curves {
    let cfg = config(system);
    let clock = Instant::now();
    let run = |method: Method| -> Vec<Vec<MetricsRecord>> {
        SEEDS
            .iter()
            .map(|&seed| {
                let dir = root.join(cfg.label(method, Acquisition::Entropy)).join(format!("seed-{seed}"));
                let state = run_to_dir(&cfg, method, Acquisition::Entropy, seed, &dir, true)
                    .unwrap_or_else(|e| panic!("{system} {method} seed {seed}: {e}"));
                state.records
            })
            .collect()
    };
    let sal = run(Method::Sal);
    let random = run(Method::Random);
    Curves { sal, random, minutes: clock.elapsed().as_secs_f64() / 60.0 }
}

fn at(records: &[MetricsRecord], budget: usize) -> &MetricsRecord {
    records.iter().find(|r| r.budget == budget).expect("budget recorded")
}

fn nll_ordering(c: &Curves) -> Check {
    let wins = c
        .sal
        .iter()
        .zip(&c.random)
        .filter(|(s, r)| {
            let mean = |x: &[MetricsRecord]| 0.5 * (at(x, 2).nll + at(x, 3).nll);
            mean(s) <= mean(r)
        })
        .count();
    let seed_mean = |runs: &[Vec<MetricsRecord>], b: usize| runs.iter().map(|x| at(x, b).nll).sum::<f64>() / runs.len() as f64;
    Check::new(
        wins >= 4 && c.minutes <= 60.0,
        format!(
            "SAL ≤ random in {wins}/5 seeds at budgets 2-3; seed means b2 {:.3} vs {:.3}, b3 {:.3} vs {:.3}; {:.1} min",
            seed_mean(&c.sal, 2),
            seed_mean(&c.random, 2),
            seed_mean(&c.sal, 3),
            seed_mean(&c.random, 3),
            c.minutes
        ),
    )
}

fn f1_ordering(curves: &[(&str, &Curves)]) -> Check {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, c) in curves {
        let mean = |runs: &[Vec<MetricsRecord>]| runs.iter().map(|x| at(x, BUDGET).f1).sum::<f64>() / runs.len() as f64;
        let (s, r) = (mean(&c.sal), mean(&c.random));
        ok &= s >= r;
        parts.push(format!("{name} {s:.3} vs {r:.3}"));
    }
    Check::new(ok, format!("final-budget seed-mean F1 SAL vs random: {}", parts.join(", ")))
}

fn safety_contract(curves: &[(&str, &Curves)], delta: f64) -> Check {
    let chosen: Vec<&MetricsRecord> = curves
        .iter()
        .flat_map(|(_, c)| c.sal.iter().flatten())
        .filter(|r| r.budget > 0 && r.theta_0.is_some())
        .collect();
    let below = chosen.iter().filter(|r| r.xi_est.map_or(true, |xi| xi < delta)).count();
    let violations = chosen.iter().filter(|r| r.truly_safe == Some(false)).count();
    let rate = violations as f64 / chosen.len().max(1) as f64;
    Check::new(
        below == 0 && rate <= (1.0 - delta) + 0.10,
        format!("{} chosen candidates, {below} with ξ < δ, true violation rate {rate:.3}", chosen.len()),
    )
}

fn main() -> ExitCode {
    let tmp;
    let root: PathBuf = match std::env::var_os("SALGPODE_ACCEPTANCE_DIR") {
        Some(d) => d.into(),
        None => {
            tmp = tempfile::tempdir().expect("temporary directory");
            tmp.path().to_path_buf()
        }
    };
    let vdp = curves(&root, "vdp");
    let lv = curves(&root, "lotka-volterra");
    let both = [("vdp", &vdp), ("lotka-volterra", &lv)];
    // Learning-curve orderings are reported but do not gate the exit status.
    let reported = [
        ("vdp-nll-ordering", nll_ordering(&vdp)),
        ("safe-set-f1-ordering", f1_ordering(&both)),
    ];
    let gating = [
        ("safety-contract", safety_contract(&both, config("vdp").planner.delta)),
        ("entropy-oracle", common::entropy_oracle()),
        ("argmax-invariance", common::argmax_invariance(10)),
        ("decoupled-moments", common::decoupled_moments(2000, 21)),
        ("integrator-order", common::integrator_order()),
        ("hygiene-gram-psd", common::gram_psd()),
        ("hygiene-kl", common::kl_sanity()),
        ("hygiene-serialization", common::serialization_round_trips()),
        ("hygiene-determinism", common::seeded_determinism()),
    ];
    for (name, c) in reported.iter().chain(&gating) {
        println!("{}", c.line(name));
    }
    let passed = reported.iter().chain(&gating).filter(|(_, c)| c.passed).count();
    println!("{passed}/{} criteria passed", reported.len() + gating.len());
    if gating.iter().all(|(_, c)| c.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
