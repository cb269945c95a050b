use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use panda::checks::{run_suite, CheckResult, Suite};
use panda::optimizers::{run, History, Method, OptimizerState, PandaConfig, Problem, RunRecord};
use rayon::prelude::*;
use serde::Serialize;

use crate::{thread_pool, CliError, ExperimentConfig};

pub const CSV_HEADER: [&str; 6] = ["outer_iter", "env_steps", "ul_objective", "ne_gap", "grad_norm", "wall_ms"];

/// A finished (optimizer, seed) run.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub method: Method,
    pub seed: u64,
    pub csv: PathBuf,
    pub history: History,
}

#[derive(Serialize)]
struct CsvRow {
    outer_iter: usize,
    env_steps: u64,
    ul_objective: f64,
    ne_gap: f64,
    grad_norm: f64,
    wall_ms: u64,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    env: &'static str,
    config: &'a ExperimentConfig,
    runs: Vec<ManifestRun>,
}

#[derive(Serialize)]
struct ManifestRun {
    optimizer: Method,
    seed: u64,
    csv: String,
    outer_iters: usize,
    env_steps: u64,
    initial_ul_objective: f64,
    initial_ne_gap: f64,
    final_ul_objective: f64,
    final_ne_gap: f64,
}

pub fn csv_name(method: Method, seed: u64) -> String {
    format!("{method}_{seed}.csv")
}

fn write_row(writer: &mut csv::Writer<File>, record: &RunRecord) -> csv::Result<()> {
    if let (Some(ul_objective), Some(ne_gap)) = (record.ul_objective, record.ne_gap) {
        writer.serialize(CsvRow {
            outer_iter: record.outer_iter,
            env_steps: record.env_steps,
            ul_objective,
            ne_gap,
            grad_norm: record.grad_norm,
            wall_ms: record.wall_ms,
        })?;
        writer.flush()?;
    }
    Ok(())
}

fn run_one(config: &ExperimentConfig, problem: Problem<'_>, state: OptimizerState, method: Method, seed: u64, out_dir: &Path) -> Result<RunOutcome, CliError> {
    let path = out_dir.join(csv_name(method, seed));
    let file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let to_io = |e: csv::Error| CliError::io(&path, std::io::Error::other(e));
    writer.write_record(CSV_HEADER).map_err(to_io)?;
    writer.flush().map_err(|e| CliError::io(&path, e))?;
    let panda = PandaConfig { seed, ..config.panda.clone() };
    let mut write_error = None;
    let result = run(method, &panda, problem, state, config.run_options(), &mut |record| {
        if write_error.is_none() {
            write_error = write_row(&mut writer, record).err();
        }
    });
    if let Some(e) = write_error {
        return Err(to_io(e));
    }
    writer.flush().map_err(|e| CliError::io(&path, e))?;
    match result {
        Ok(history) => Ok(RunOutcome { method, seed, csv: path, history }),
        Err(source) => Err(CliError::Runtime { label: format!("{method} seed {seed}"), csv: path, source }),
    }
}

/// Runs every (optimizer, seed) pair of `config` in the worker pool, writing one CSV per
/// run and a `manifest.json` into `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunOutcome>, CliError> {
    config.validate()?;
    let instance = config.env.build().map_err(|e| CliError::Config(e.to_string()))?;
    let problem = Problem { game: &instance.game, ul: &instance.ul };
    let out_dir = &config.out_dir;
    std::fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;

    let jobs: Vec<(Method, u64)> = config
        .methods()
        .into_iter()
        .flat_map(|m| config.distinct_seeds().into_iter().map(move |s| (m, s)))
        .collect();
    let pool = thread_pool()?;
    let results: Vec<Result<RunOutcome, CliError>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, seed)| {
                let state = OptimizerState::new(&instance.game, instance.model.clone());
                run_one(config, problem, state, method, seed, out_dir)
            })
            .collect()
    });

    let mut outcomes = Vec::new();
    let mut first_error = None;
    for result in results {
        match result {
            Ok(outcome) => outcomes.push(outcome),
            Err(e) => {
                first_error.get_or_insert(e);
            }
        }
    }
    write_manifest(config, &outcomes)?;
    match first_error {
        Some(e) => Err(e),
        None => Ok(outcomes),
    }
}

fn write_manifest(config: &ExperimentConfig, outcomes: &[RunOutcome]) -> Result<(), CliError> {
    let runs = outcomes
        .iter()
        .map(|o| {
            let last = o.history.final_evaluation();
            ManifestRun {
                optimizer: o.method,
                seed: o.seed,
                csv: csv_name(o.method, o.seed),
                outer_iters: o.history.records.len(),
                env_steps: o.history.env_steps(),
                initial_ul_objective: o.history.initial.ul_objective,
                initial_ne_gap: o.history.initial.ne_gap,
                final_ul_objective: last.ul_objective,
                final_ne_gap: last.ne_gap,
            }
        })
        .collect();
    let manifest = Manifest { version: panda_version(), env: config.env.name(), config, runs };
    let path = config.out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mut file = File::create(&path).map_err(|e| CliError::io(&path, e))?;
    writeln!(file, "{text}").map_err(|e| CliError::io(&path, e))
}

pub fn panda_version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}

/// Results of a property-check run.
#[derive(Clone, Debug)]
pub struct CheckReport {
    pub results: Vec<CheckResult>,
}

impl CheckReport {
    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| !r.pass).count()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.results {
            let status = if r.pass { "PASS" } else { "FAIL" };
            out += &format!("{status} {:<12} {:<48} residual {:.3e} threshold {:.3e}\n", r.suite, r.name, r.residual, r.threshold);
        }
        out += &format!("{} properties checked, {} failed\n", self.results.len(), self.failures());
        out
    }
}

pub fn run_checks(suite: &str) -> Result<CheckReport, CliError> {
    let suite: Suite = suite.parse().map_err(|e: panda::Error| CliError::Config(e.to_string()))?;
    let results = thread_pool()?
        .install(|| run_suite(suite))
        .map_err(|e| CliError::Failed(format!("check suite aborted: {e}")))?;
    Ok(CheckReport { results })
}
