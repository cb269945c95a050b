use std::fs::File;
use std::io::Write;

use panda::optimizers::{Evaluation, History, Method};
use serde::Serialize;

use crate::{run_experiment, CliError, ExperimentConfig, RunOutcome};

/// Number of env-step grid points in the aligned curves.
pub const GRID_POINTS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub optimizer: Method,
    pub seeds: usize,
    pub env_steps: u64,
    pub ul_objective: f64,
    pub ne_gap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignedRow {
    pub optimizer: Method,
    pub env_steps: u64,
    pub ul_objective: f64,
    pub ne_gap: f64,
}

#[derive(Clone, Debug)]
pub struct Comparison {
    pub summary: Vec<SummaryRow>,
    pub aligned: Vec<AlignedRow>,
    pub runs: Vec<RunOutcome>,
}

impl Comparison {
    pub fn render(&self) -> String {
        let mut out = format!("{:<12} {:>5} {:>12} {:>14} {:>14}\n", "optimizer", "seeds", "env_steps", "ul_objective", "ne_gap");
        for r in &self.summary {
            out += &format!("{:<12} {:>5} {:>12} {:>14.6} {:>14.6e}\n", r.optimizer.name(), r.seeds, r.env_steps, r.ul_objective, r.ne_gap);
        }
        out
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Exact metrics of the last evaluation at or before `steps` env steps.
pub fn evaluation_at(history: &History, steps: u64) -> Evaluation {
    history
        .records
        .iter()
        .take_while(|r| r.env_steps <= steps)
        .filter_map(|r| r.evaluation())
        .last()
        .unwrap_or(history.initial)
}

fn check_budgets(config: &ExperimentConfig, runs: &[RunOutcome], methods: &[Method]) -> Result<(), CliError> {
    if config.env_step_budget.is_some() {
        return Ok(());
    }
    let budgets: Vec<(Method, u64)> = methods
        .iter()
        .map(|&m| (m, runs.iter().filter(|r| r.method == m).map(|r| r.history.env_steps()).max().unwrap_or(0)))
        .collect();
    if budgets.windows(2).all(|w| w[0].1 == w[1].1) {
        return Ok(());
    }
    let listing: Vec<String> = budgets.iter().map(|(m, b)| format!("{m}: {b}")).collect();
    Err(CliError::Config(format!(
        "optimizers consumed different env-step budgets ({}); set env_step_budget to compare at a common budget",
        listing.join(", ")
    )))
}

/// Runs every optimizer in `config` and aligns their curves on a common env-step grid.
/// Each listed optimizer gets its own rows, so a repeated entry yields repeated rows.
/// Writes `compare_aligned.csv` (long format medians) and `compare_summary.csv`.
pub fn compare(config: &ExperimentConfig) -> Result<Comparison, CliError> {
    config.validate()?;
    if config.optimizers.len() < 2 {
        return Err(CliError::Config("compare needs at least two optimizers".into()));
    }
    let methods = config.methods();
    let runs = run_experiment(config)?;
    check_budgets(config, &runs, &methods)?;

    let horizon = runs.iter().map(|r| r.history.env_steps()).min().unwrap_or(0);
    let grid: Vec<u64> = (0..=GRID_POINTS).map(|k| horizon * k as u64 / GRID_POINTS as u64).collect();
    let mut summary = Vec::new();
    let mut aligned = Vec::new();
    for &method in &config.optimizers {
        let mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.method == method).collect();
        for &steps in &grid {
            let evals: Vec<Evaluation> = mine.iter().map(|r| evaluation_at(&r.history, steps)).collect();
            aligned.push(AlignedRow {
                optimizer: method,
                env_steps: steps,
                ul_objective: median(&evals.iter().map(|e| e.ul_objective).collect::<Vec<_>>()),
                ne_gap: median(&evals.iter().map(|e| e.ne_gap).collect::<Vec<_>>()),
            });
        }
        let finals: Vec<Evaluation> = mine.iter().map(|r| r.history.final_evaluation()).collect();
        let steps: Vec<f64> = mine.iter().map(|r| r.history.env_steps() as f64).collect();
        summary.push(SummaryRow {
            optimizer: method,
            seeds: mine.len(),
            env_steps: median(&steps) as u64,
            ul_objective: median(&finals.iter().map(|e| e.ul_objective).collect::<Vec<_>>()),
            ne_gap: median(&finals.iter().map(|e| e.ne_gap).collect::<Vec<_>>()),
        });
    }
    write_csv(&config.out_dir.join("compare_aligned.csv"), &aligned)?;
    write_csv(&config.out_dir.join("compare_summary.csv"), &summary)?;
    Ok(Comparison { summary, aligned, runs })
}

fn write_csv<T: Serialize>(path: &std::path::Path, rows: &[T]) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    for row in rows {
        writer.serialize(row).map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    }
    writer.into_inner().map_err(|e| CliError::io(path, e.into_error()))?.flush().map_err(|e| CliError::io(path, e))
}
