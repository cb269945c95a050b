//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are reported but do not fail the process unless
//! `ACCEPTANCE_STRICT=1` is set.

use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use panda::checks::{run_suite, Suite};
use panda::envs::{build_synthetic, GridSpec, SyntheticSpec};
use panda::optimizers::{run_oracle, Method, OptimizerState, PandaConfig, Problem, RunOptions};
use panda_cli::compare::median;
use panda_cli::run::csv_name;
use panda_cli::{run_experiment, EnvSpec, ExperimentConfig, RunOutcome};

const KNOWN_RED: [usize; 2] = [6, 8];
const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    id: usize,
    pass: bool,
    summary: String,
    details: Vec<String>,
    elapsed: Duration,
}

fn suite_criterion(id: usize, suite: Suite, limit: Duration) -> Verdict {
    let start = Instant::now();
    let results = run_suite(suite);
    let elapsed = start.elapsed();
    match results {
        Ok(results) => {
            let failed: Vec<String> = results
                .iter()
                .filter(|r| !r.pass)
                .map(|r| format!("failed: {} (residual {:.3e}, threshold {:.3e})", r.name, r.residual, r.threshold))
                .collect();
            let details = results
                .iter()
                .map(|r| format!("{} {}: residual {:.3e} threshold {:.3e}", if r.pass { "ok" } else { "FAIL" }, r.name, r.residual, r.threshold))
                .collect();
            let in_time = elapsed <= limit;
            Verdict {
                id,
                pass: failed.is_empty() && in_time,
                summary: format!("{} suite: {} properties, {} failed, {:.1?} (limit {:?})", suite.name(), results.len(), failed.len(), elapsed, limit),
                details,
                elapsed,
            }
        }
        Err(e) => Verdict { id, pass: false, summary: format!("{} suite aborted: {e}", suite.name()), details: vec![], elapsed },
    }
}

fn synthetic_config(out: &Path, optimizers: Vec<Method>, lambda: f64) -> ExperimentConfig {
    ExperimentConfig {
        env: EnvSpec::Synthetic(SyntheticSpec { seed: 0, ..Default::default() }),
        optimizers,
        panda: PandaConfig { lambda, outer_iters: 1_000_000, ..Default::default() },
        eval_every: 5,
        seeds: SEEDS.to_vec(),
        out_dir: out.to_path_buf(),
        env_step_budget: Some(200_000),
        timing: false,
    }
}

struct Finals {
    gap_ratio: f64,
    gap: f64,
    ul_objective: f64,
    ul_spread: f64,
}

fn finals(runs: &[RunOutcome], method: Method) -> Finals {
    let mine: Vec<&RunOutcome> = runs.iter().filter(|r| r.method == method).collect();
    let ratios: Vec<f64> = mine.iter().map(|r| r.history.final_evaluation().ne_gap / r.history.initial.ne_gap).collect();
    let gaps: Vec<f64> = mine.iter().map(|r| r.history.final_evaluation().ne_gap).collect();
    let uls: Vec<f64> = mine.iter().map(|r| r.history.final_evaluation().ul_objective).collect();
    let spread = uls.iter().cloned().fold(f64::MIN, f64::max) - uls.iter().cloned().fold(f64::MAX, f64::min);
    Finals { gap_ratio: median(&ratios), gap: median(&gaps), ul_objective: median(&uls), ul_spread: spread }
}

fn criterion_6(out: &Path) -> (Verdict, Vec<RunOutcome>) {
    let start = Instant::now();
    let config = synthetic_config(out, Method::ALL.to_vec(), 4.0);
    let runs = match run_experiment(&config) {
        Ok(runs) => runs,
        Err(e) => {
            let v = Verdict { id: 6, pass: false, summary: format!("synthetic runs aborted: {e}"), details: vec![], elapsed: start.elapsed() };
            return (v, vec![]);
        }
    };
    let elapsed = start.elapsed();
    let [panda, oracle, pbrl, alt] = [Method::Panda, Method::Oracle, Method::Pbrl, Method::Alternating].map(|m| finals(&runs, m));
    let incentive = |f: &Finals| -f.ul_objective;
    let gaps_ok = [&panda, &pbrl, &alt].iter().all(|f| f.gap_ratio < 0.1);
    let order_ok = incentive(&panda) >= incentive(&pbrl) && incentive(&panda) >= incentive(&alt);
    let rel = (incentive(&panda) - incentive(&oracle)).abs() / incentive(&oracle).abs();
    let oracle_ok = rel <= 0.05;
    let in_time = elapsed <= Duration::from_secs(600);
    let mut details: Vec<String> = [("panda", &panda), ("oracle", &oracle), ("pbrl", &pbrl), ("alternating", &alt)]
        .iter()
        .map(|(name, f)| format!("{name:<12} median final gap / initial {:.4}, median final incentive {:.4}", f.gap_ratio, incentive(f)))
        .collect();
    details.push(format!("{} gap < 10% of initial for panda, pbrl and alternating", mark(gaps_ok)));
    details.push(format!("{} panda incentive >= pbrl and >= alternating", mark(order_ok)));
    details.push(format!("{} panda incentive within 5% of oracle (relative difference {:.2}%)", mark(oracle_ok), 100.0 * rel));
    let v = Verdict {
        id: 6,
        pass: gaps_ok && order_ok && oracle_ok && in_time,
        summary: format!("synthetic, 3 seeds, 2e5 env steps: gap {}, ordering {}, oracle match {}, {:.1?}", mark(gaps_ok), mark(order_ok), mark(oracle_ok), elapsed),
        details,
        elapsed,
    };
    (v, runs)
}

fn criterion_7(out: &Path) -> Verdict {
    let start = Instant::now();
    let mut results = Vec::new();
    for lambda in [1.0, 4.0, 10.0] {
        let config = synthetic_config(&out.join(format!("lambda_{lambda}")), vec![Method::Panda], lambda);
        match run_experiment(&config) {
            Ok(runs) => results.push((lambda, finals(&runs, Method::Panda))),
            Err(e) => return Verdict { id: 7, pass: false, summary: format!("lambda {lambda} aborted: {e}"), details: vec![], elapsed: start.elapsed() },
        }
    }
    let elapsed = start.elapsed();
    let (l1, l4, l10) = (&results[0].1, &results[1].1, &results[2].1);
    let gap_ok = l1.gap > l4.gap;
    let noise = l4.ul_spread.max(l10.ul_spread);
    let incentive_ok = -l10.ul_objective <= -l4.ul_objective + noise;
    let mut details: Vec<String> = results
        .iter()
        .map(|(lambda, f)| format!("lambda {lambda:<4} median final gap {:.4} (ratio {:.4}), median final incentive {:.4}, seed spread {:.4}", f.gap, f.gap_ratio, -f.ul_objective, f.ul_spread))
        .collect();
    details.push(format!("{} gap(lambda=1) > gap(lambda=4)", mark(gap_ok)));
    details.push(format!("{} incentive(lambda=10) <= incentive(lambda=4) + seed spread {:.4}", mark(incentive_ok), noise));
    Verdict {
        id: 7,
        pass: gap_ok && incentive_ok && elapsed <= Duration::from_secs(900),
        summary: format!("lambda ablation: gap ordering {}, incentive {}, {:.1?}", mark(gap_ok), mark(incentive_ok), elapsed),
        details,
        elapsed,
    }
}

fn criterion_8(out: &Path) -> Verdict {
    let start = Instant::now();
    let config = ExperimentConfig {
        env: EnvSpec::Sentinel(GridSpec::default()),
        optimizers: vec![Method::Panda, Method::Pbrl, Method::Alternating],
        panda: PandaConfig { batch_ul: 64, batch_traj: 64, horizon: 20, outer_iters: 1_000_000, ..Default::default() },
        eval_every: 5,
        seeds: SEEDS.to_vec(),
        out_dir: out.to_path_buf(),
        env_step_budget: Some(500_000),
        timing: false,
    };
    let runs = match run_experiment(&config) {
        Ok(runs) => runs,
        Err(e) => return Verdict { id: 8, pass: false, summary: format!("sentinel runs aborted: {e}"), details: vec![], elapsed: start.elapsed() },
    };
    let [panda, pbrl, alt] = [Method::Panda, Method::Pbrl, Method::Alternating].map(|m| finals(&runs, m));
    let initial = runs[0].history.initial.ul_objective;
    let order_ok = panda.ul_objective <= pbrl.ul_objective && panda.ul_objective <= alt.ul_objective;
    let mut details = vec![format!("initial expected restricted-cell visits {initial:.4}")];
    for (name, f) in [("panda", &panda), ("pbrl", &pbrl), ("alternating", &alt)] {
        details.push(format!("{name:<12} median final visits {:.4}, median final gap {:.4}", f.ul_objective, f.gap));
    }
    details.push(format!("{} panda visits <= pbrl and <= alternating", mark(order_ok)));

    let inst = build_synthetic(&SyntheticSpec::default()).expect("synthetic instance");
    let problem = Problem { game: &inst.game, ul: &inst.ul };
    let oracle_config = PandaConfig { outer_iters: 500, ..Default::default() };
    let norm_ok = match run_oracle(&oracle_config, problem, OptimizerState::new(&inst.game, inst.model.clone()), RunOptions { eval_every: 500, ..Default::default() }) {
        Ok(history) => {
            let norms: Vec<f64> = history.records.iter().map(|r| r.grad_norm).collect();
            let smallest = norms.iter().cloned().fold(f64::INFINITY, f64::min);
            let ok = smallest < 1e-3;
            details.push(format!(
                "{} oracle hypergradient norm below 1e-3 within 500 outer steps (first {:.3e}, step 100 {:.3e}, last {:.3e}, smallest {:.3e})",
                mark(ok),
                norms[0],
                norms[99],
                norms[norms.len() - 1],
                smallest
            ));
            ok
        }
        Err(e) => {
            details.push(format!("FAIL oracle run aborted: {e}"));
            false
        }
    };
    let elapsed = start.elapsed();
    Verdict {
        id: 8,
        pass: order_ok && norm_ok && elapsed <= Duration::from_secs(1800),
        summary: format!("sentinel, 3 seeds, 5e5 env steps: ordering {}, oracle norm check {}, {:.1?}", mark(order_ok), mark(norm_ok), elapsed),
        details,
        elapsed,
    }
}

fn criterion_9(first: &Path, again: &Path, reference: &[RunOutcome]) -> Verdict {
    let start = Instant::now();
    let config = ExperimentConfig { seeds: vec![0], ..synthetic_config(again, Method::ALL.to_vec(), 4.0) };
    if let Err(e) = run_experiment(&config) {
        return Verdict { id: 9, pass: false, summary: format!("re-run aborted: {e}"), details: vec![], elapsed: start.elapsed() };
    }
    let mut details = Vec::new();
    let mut pass = !reference.is_empty();
    for method in Method::ALL {
        let name = csv_name(method, 0);
        let a = std::fs::read(first.join(&name)).unwrap_or_default();
        let b = std::fs::read(again.join(&name)).unwrap_or_default();
        let same = !a.is_empty() && a == b;
        pass &= same;
        details.push(format!("{} {name} ({} bytes)", if same { "identical" } else { "DIFFERENT" }, a.len()));
    }
    Verdict { id: 9, pass, summary: format!("re-run of the synthetic comparison at seed 0: byte-identical CSVs {}", mark(pass)), details, elapsed: start.elapsed() }
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let dir = tempfile::tempdir().expect("temporary directory");
    let synthetic = dir.path().join("synthetic");

    let mut verdicts = vec![
        suite_criterion(1, Suite::Operators, Duration::from_secs(10)),
        suite_criterion(2, Suite::Equilibrium, Duration::from_secs(60)),
        suite_criterion(3, Suite::Gradients, Duration::from_secs(60)),
        suite_criterion(4, Suite::Estimators, Duration::from_secs(300)),
        suite_criterion(5, Suite::Pl, Duration::from_secs(120)),
    ];
    let (six, runs) = criterion_6(&synthetic);
    verdicts.push(six);
    verdicts.push(criterion_7(&dir.path().join("ablation")));
    verdicts.push(criterion_8(&dir.path().join("sentinel")));
    verdicts.push(criterion_9(&synthetic, &dir.path().join("synthetic_again"), &runs));

    println!();
    for v in &verdicts {
        for line in &v.details {
            println!("    [{}] {line}", v.id);
        }
    }
    println!();
    let mut unexpected = 0;
    for v in &verdicts {
        let tag = if v.pass { "PASS" } else { "FAIL" };
        let known = !v.pass && KNOWN_RED.contains(&v.id);
        println!("criterion {}: {tag} {}{}", v.id, v.summary, if known { " (known red)" } else { "" });
        if !v.pass && (strict || !known) {
            unexpected += 1;
        }
        let _ = v.elapsed;
    }
    let red = verdicts.iter().filter(|v| !v.pass).count();
    println!("acceptance: {} of {} criteria pass, {red} red, {unexpected} unexpected", verdicts.len() - red, verdicts.len());
    if unexpected == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
