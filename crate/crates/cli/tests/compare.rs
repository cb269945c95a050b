use panda::optimizers::Method;
use panda_cli::compare::{median, GRID_POINTS};
use panda_cli::{compare, ExperimentConfig};

#[test]
fn oracle_gap_is_no_worse_than_panda_at_equal_budget() {
    let dir = tempfile::tempdir().unwrap();
    let config = ExperimentConfig {
        optimizers: vec![Method::Panda, Method::Oracle],
        env_step_budget: Some(40_000),
        out_dir: dir.path().to_path_buf(),
        panda: panda::optimizers::PandaConfig { outer_iters: 100_000, ..Default::default() },
        ..Default::default()
    };
    let comparison = compare(&config).unwrap();
    assert_eq!(comparison.summary.len(), 2);
    let (panda, oracle) = (&comparison.summary[0], &comparison.summary[1]);
    assert_eq!((panda.optimizer, oracle.optimizer), (Method::Panda, Method::Oracle));
    assert!(oracle.ne_gap <= panda.ne_gap + 1e-6, "{oracle:?} vs {panda:?}");
    assert!(panda.env_steps >= 40_000 && oracle.env_steps >= 40_000);

    let aligned = std::fs::read_to_string(dir.path().join("compare_aligned.csv")).unwrap();
    let mut lines = aligned.lines();
    assert_eq!(lines.next(), Some("optimizer,env_steps,ul_objective,ne_gap"));
    assert_eq!(lines.count(), 2 * (GRID_POINTS + 1));
    let table = comparison.render();
    assert!(table.contains("panda") && table.contains("oracle"));
}

#[test]
fn medians() {
    assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
    assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    assert!(median(&[]).is_nan());
}
