use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use salgpode::harness::{
    aggregate, configure_threads, find_metric_files, read_metrics, run_to_dir, write_summary, Experiment,
    ExperimentConfig, Method,
};
use salgpode::model::GPODEModel;
use salgpode::planner::Acquisition;
use salgpode::systems::{SystemSpec, SYSTEM_NAMES};
use salgpode::{Error, Result};

#[derive(Parser)]
#[command(name = "salgpode", version, about = "Safe active learning for GP-ODE models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the learning loop for every seed in the config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// sal or random; defaults to the config's method.
        #[arg(long)]
        method: Option<String>,
        /// entropy, mutual-information or covariance.
        #[arg(long)]
        acquisition: Option<String>,
        /// Continue unfinished runs found in the output directory.
        #[arg(long)]
        resume: bool,
    },
    /// Score a saved model checkpoint on its system.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment config supplying metric settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize metrics CSVs found under a directory.
    Aggregate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Print the registered systems.
    ListSystems,
}

fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    match cli.command {
        Command::Run { config, method, acquisition, resume } => {
            let cfg = ExperimentConfig::load(&config)?;
            let method: Method = method.map_or(Ok(cfg.method), |m| m.parse())?;
            let acquisition: Acquisition = acquisition.map_or(Ok(cfg.acquisition), |a| a.parse())?;
            let root = cfg.output_dir.join(cfg.label(method, acquisition));
            for &seed in &cfg.seeds {
                let dir = root.join(format!("seed-{seed}"));
                let state = run_to_dir(&cfg, method, acquisition, seed, &dir, resume)?;
                let last = state.records.last().expect("finished run has records");
                eprintln!(
                    "seed {seed}: {} episodes, {} skipped rounds, final nll {:.4}, f1 {:.3} -> {}",
                    state.episodes.len(),
                    state.skipped_rounds,
                    last.nll,
                    last.f1,
                    dir.display()
                );
            }
        }
        Command::Evaluate { checkpoint, config, seed } => {
            let ck = GPODEModel::load(&checkpoint)?;
            let mut cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(name) = &ck.system {
                cfg.system = name.clone();
            }
            let exp = Experiment::new(&cfg, seed)?;
            let (nll, f1) = exp.evaluate(&ck.model, seed)?;
            println!("{}", serde_json::json!({ "system": cfg.system, "nll": nll, "f1": f1 }));
        }
        Command::Aggregate { input, output } => {
            let files = find_metric_files(&input)?;
            if files.is_empty() {
                return Err(Error::Schema(format!("no metrics CSV files under {}", input.display())));
            }
            let mut records = Vec::new();
            for f in files.iter().filter(|f| f.canonicalize().ok() != output.canonicalize().ok()) {
                records.extend(read_metrics(f)?);
            }
            write_summary(&output, &aggregate(&records)?)?;
        }
        Command::ListSystems => {
            for name in SYSTEM_NAMES {
                let s = SystemSpec::by_name(name)?;
                println!(
                    "{name}\tT={} N={} sigma={} safety={:?}..{:?}",
                    s.horizon, s.n_obs, s.obs_noise, s.safety.lower, s.safety.upper
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
