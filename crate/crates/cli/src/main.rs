use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use panda_cli::{compare, run_checks, run_experiment, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "panda", version, about = "Penalty-based bilevel optimization over regularized Markov games")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (optimizer, seed) pair of a config and write CSVs plus a manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run this single seed instead of the config's seed list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run several optimizers and write env-step-aligned medians and a summary table.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a property-check suite: operators, equilibrium, gradients, estimators, pl or all.
    Check { suite: String },
}

fn load(path: &PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(out) = out {
        config.out_dir = out;
    }
    if let Some(seed) = seed {
        config.seeds = vec![seed];
    }
    Ok(config)
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out, seed } => {
            let config = load(&config, out, seed)?;
            let outcomes = run_experiment(&config)?;
            for o in &outcomes {
                let last = o.history.final_evaluation();
                println!(
                    "{} seed {}: {} outer iterations, {} env steps, ul_objective {:.6}, ne_gap {:.6e} -> {}",
                    o.method,
                    o.seed,
                    o.history.records.len(),
                    o.history.env_steps(),
                    last.ul_objective,
                    last.ne_gap,
                    o.csv.display()
                );
            }
            Ok(())
        }
        Command::Compare { config, out } => {
            let config = load(&config, out, None)?;
            let comparison = compare(&config)?;
            print!("{}", comparison.render());
            Ok(())
        }
        Command::Check { suite } => {
            let report = run_checks(&suite)?;
            print!("{}", report.render());
            match report.failures() {
                0 => Ok(()),
                n => Err(CliError::Failed(format!("{n} properties failed"))),
            }
        }
    }
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
