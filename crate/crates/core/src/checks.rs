//! Numeric property suites: Bellman operator properties, equilibrium quality,
//! gradient correctness, estimator statistics and PL inequalities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::envs::{build_synthetic, SyntheticSpec};
use crate::error::{Error, Result};
use crate::exact::{
    exact_grad, game_gradients, ni_gap_table, policy_bellman, policy_eval, soft_bellman_optimality,
    solve_ne, truncated_grad, GradTarget,
};
use crate::game::{MarkovGame, Player, RewardModel, TabularPolicy};
use crate::optimizers::UlObjective;
use crate::sampling::{accumulate_grad_x, accumulate_policy_grad, game_spec, sample_batch, StreamKey};

/// Outcome of one property: `pass` iff `residual <= threshold`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub name: String,
    pub residual: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl CheckResult {
    fn new(suite: &'static str, name: impl Into<String>, residual: f64, threshold: f64) -> Self {
        Self { suite, name: name.into(), residual, threshold, pass: residual <= threshold }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Operators,
    Equilibrium,
    Gradients,
    Estimators,
    Pl,
    All,
}

impl Suite {
    pub const SINGLE: [Suite; 5] = [Suite::Operators, Suite::Equilibrium, Suite::Gradients, Suite::Estimators, Suite::Pl];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Operators => "operators",
            Suite::Equilibrium => "equilibrium",
            Suite::Gradients => "gradients",
            Suite::Estimators => "estimators",
            Suite::Pl => "pl",
            Suite::All => "all",
        }
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::SINGLE
            .into_iter()
            .chain([Suite::All])
            .find(|suite| suite.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown suite '{s}'")))
    }
}

pub fn run_suite(suite: Suite) -> Result<Vec<CheckResult>> {
    match suite {
        Suite::Operators => operators(),
        Suite::Equilibrium => equilibrium(),
        Suite::Gradients => gradients(),
        Suite::Estimators => estimators(),
        Suite::Pl => pl(),
        Suite::All => {
            let mut out = Vec::new();
            for s in Suite::SINGLE {
                out.extend(run_suite(s)?);
            }
            Ok(out)
        }
    }
}

/// Dense game with random kernel, base reward in `[0, 1)` and full-support `rho`.
pub fn random_game(seed: u64, n_states: usize, n_min: usize, n_max: usize, discount: f64, tau: f64) -> Result<MarkovGame> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_joint = n_states * n_min * n_max;
    let mut dense = Vec::with_capacity(n_joint * n_states);
    for _ in 0..n_joint {
        let row: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.05).collect();
        let sum: f64 = row.iter().sum();
        dense.extend(row.iter().map(|p| p / sum));
    }
    let base = (0..n_joint).map(|_| rng.gen::<f64>()).collect();
    let init: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.5).collect();
    let z: f64 = init.iter().sum();
    MarkovGame::from_dense(
        n_states,
        n_min,
        n_max,
        discount,
        tau,
        tau,
        init.iter().map(|p| p / z).collect(),
        base,
        vec![false; n_states],
        &dense,
    )
}

/// Softmax policy with logits uniform in `[-spread, spread]`.
pub fn random_policy(rng: &mut impl Rng, n_states: usize, n_actions: usize, spread: f64) -> TabularPolicy {
    let logits = (0..n_states * n_actions).map(|_| spread * (2.0 * rng.gen::<f64>() - 1.0)).collect();
    TabularPolicy::from_logits(n_states, n_actions, logits).expect("finite logits")
}

fn random_model(rng: &mut impl Rng, game: &MarkovGame, spread: f64) -> Result<RewardModel> {
    let mut model = RewardModel::for_game(game, 1.0)?;
    model.set_incentive((0..game.n_joint()).map(|_| spread * (2.0 * rng.gen::<f64>() - 1.0)).collect())?;
    Ok(model)
}

fn sup(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x))
}

const OPERATOR_CASES: u64 = 50;

/// Contraction, monotonicity and distributivity of `T_{y,z,h}` and `T_{*,h}`.
pub fn operators() -> Result<Vec<CheckResult>> {
    const SUITE: &str = "operators";
    let mut worst = [0.0f64; 6];
    for i in 0..OPERATOR_CASES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + i);
        let n = rng.gen_range(2..=5);
        let (na, nb) = (rng.gen_range(2..=3), rng.gen_range(2..=3));
        let gamma = rng.gen_range(0.5..0.99);
        let game = random_game(1000 + i, n, na, nb, gamma, rng.gen_range(0.05..0.5))?;
        let model = random_model(&mut rng, &game, 2.0)?;
        let y = random_policy(&mut rng, n, na, 2.0);
        let z = random_policy(&mut rng, n, nb, 2.0);
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let up: Vec<f64> = v.iter().map(|x| x + rng.gen_range(0.0..5.0)).collect();
        let c = rng.gen_range(-5.0..5.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let dist = sup(v.iter().zip(&w).map(|(a, b)| (a - b).abs()));

        let ops: [&dyn Fn(&[f64]) -> Result<Vec<f64>>; 2] = [
            &|u| Ok(policy_bellman(&game, &model, &y, &z, u)?.0),
            &|u| Ok(soft_bellman_optimality(&game, &model, u)?.0),
        ];
        for (k, op) in ops.iter().enumerate() {
            let (tv, tw, tup, tshift) = (op(&v)?, op(&w)?, op(&up)?, op(&shifted)?);
            let contraction = sup(tv.iter().zip(&tw).map(|(a, b)| (a - b).abs())) - gamma * dist;
            let monotone = sup(tv.iter().zip(&tup).map(|(a, b)| a - b));
            let distributive = sup(tshift.iter().zip(&tv).map(|(a, b)| (a - b - gamma * c).abs()));
            for (j, r) in [contraction, monotone, distributive].into_iter().enumerate() {
                worst[3 * k + j] = worst[3 * k + j].max(r);
            }
        }
    }
    let names = ["contraction", "monotonicity", "distributivity"];
    Ok(["policy", "optimality"]
        .iter()
        .enumerate()
        .flat_map(|(k, op)| {
            names
                .iter()
                .enumerate()
                .map(move |(j, p)| (format!("{op} operator {p} over {OPERATOR_CASES} instances"), 3 * k + j))
        })
        .map(|(name, idx)| CheckResult::new(SUITE, name, worst[idx], 1e-10))
        .collect())
}

/// Nash equilibria of 20 small games: residual, gap, saddle inequalities, minimax equality.
pub fn equilibrium() -> Result<Vec<CheckResult>> {
    const SUITE: &str = "equilibrium";
    let (mut residual, mut gap, mut slack, mut minimax) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for i in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + i);
        let n = rng.gen_range(1..=5);
        let k = rng.gen_range(2..=3);
        let gamma = [0.5, 0.9, 0.95][i as usize % 3];
        let game = random_game(2000 + i, n, k, k, gamma, 0.1)?;
        let model = random_model(&mut rng, &game, 1.0)?;
        let ne = solve_ne(&game, &model)?;
        let stop = 1e-9 * (1.0 - gamma) / gamma;
        let t = soft_bellman_optimality(&game, &model, &ne.v_star)?;
        residual = residual.max(t.sup_distance(&ne.v_star) / stop);
        let rewards = game.reward_table(&model);
        let ni = ni_gap_table(&game, &rewards, &ne.policy_min, &ne.policy_max)?;
        gap = gap.max(ni.gap.abs());
        minimax = minimax.max((ni.j1 - ni.j2).abs());
        let v_star = policy_eval(&game, &model, &ne.policy_min, &ne.policy_max)?;
        for _ in 0..100 {
            let dev_min = random_policy(&mut rng, n, k, 3.0);
            let dev_max = random_policy(&mut rng, n, k, 3.0);
            let lo = policy_eval(&game, &model, &ne.policy_min, &dev_max)?;
            let hi = policy_eval(&game, &model, &dev_min, &ne.policy_max)?;
            for s in 0..n {
                slack = slack.max(lo[s] - v_star[s]).max(v_star[s] - hi[s]);
            }
        }
    }
    Ok(vec![
        CheckResult::new(SUITE, "Bellman residual / stopping tolerance", residual, 1.0 + 1e-3),
        CheckResult::new(SUITE, "NI gap at the equilibrium", gap, 1e-6),
        CheckResult::new(SUITE, "saddle violation over 100 deviations per game", slack, 1e-8),
        CheckResult::new(SUITE, "|minmax - maxmin|", minimax, 2e-9),
    ])
}

fn central_difference(f: impl Fn(&[f64]) -> Result<f64>, at: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(at.len());
    let mut p = at.to_vec();
    for i in 0..at.len() {
        p[i] = at[i] + h;
        let up = f(&p)?;
        p[i] = at[i] - h;
        let down = f(&p)?;
        p[i] = at[i];
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

fn relative_error(g: &[f64], fd: &[f64]) -> f64 {
    let scale = sup(fd.iter().map(|v| v.abs())).max(1e-8);
    sup(g.iter().zip(fd).map(|(a, b)| (a - b).abs())) / scale
}

/// Closed-form gradients against central finite differences of `J`.
pub fn gradients() -> Result<Vec<CheckResult>> {
    const SUITE: &str = "gradients";
    const H: f64 = 1e-6;
    let mut worst = [0.0f64; 3];
    for i in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + i);
        let game = random_game(3000 + i, 3, 2, 3, 0.9, 0.1)?;
        let model = random_model(&mut rng, &game, 1.0)?;
        let y = random_policy(&mut rng, 3, 2, 1.0);
        let z = random_policy(&mut rng, 3, 3, 1.0);
        let j = |m: &RewardModel, y: &TabularPolicy, z: &TabularPolicy| Ok(policy_eval(&game, m, y, z)?.expectation(game.init_dist()));

        let fd_x = central_difference(
            |x| {
                let mut m = model.clone();
                m.set_incentive(x.to_vec())?;
                j(&m, &y, &z)
            },
            model.incentive(),
            H,
        )?;
        let fd_min = central_difference(|l| j(&model, &TabularPolicy::from_logits(3, 2, l.to_vec())?, &z), y.logits(), H)?;
        let fd_max = central_difference(|l| j(&model, &y, &TabularPolicy::from_logits(3, 3, l.to_vec())?), z.logits(), H)?;
        let targets = [(GradTarget::Incentive, fd_x), (GradTarget::Min, fd_min), (GradTarget::Max, fd_max)];
        for (k, (wrt, fd)) in targets.iter().enumerate() {
            let g = exact_grad(&game, &model, &y, &z, *wrt)?;
            worst[k] = worst[k].max(relative_error(&g, fd));
        }
    }
    Ok(["x", "phi", "psi"]
        .iter()
        .zip(worst)
        .map(|(w, r)| CheckResult::new(SUITE, format!("dJ/d{w} vs central differences, 20 points"), r, 1e-5))
        .collect())
}

/// Per-sample mean and standard error of a vector-valued statistic.
struct Moments {
    n: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn new(dim: usize) -> Self {
        Self { n: 0, sum: vec![0.0; dim], sq: vec![0.0; dim] }
    }

    fn push(&mut self, v: &[f64]) {
        self.n += 1;
        for ((s, q), x) in self.sum.iter_mut().zip(&mut self.sq).zip(v) {
            *s += x;
            *q += x * x;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    fn variance(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum.iter().zip(&self.sq).map(|(s, q)| (q - s * s / n) / (n - 1.0)).collect()
    }

    fn std_error(&self) -> Vec<f64> {
        self.variance().iter().map(|v| (v.max(0.0) / self.n as f64).sqrt()).collect()
    }
}

/// Largest `|mean - target| / se` over coordinates with nonzero spread; exact
/// matches required elsewhere.
fn max_z(m: &Moments, target: &[f64], slack: f64) -> f64 {
    m.mean()
        .iter()
        .zip(m.std_error())
        .zip(target)
        .map(|((mean, se), t)| {
            let err = ((mean - t).abs() - slack).max(0.0);
            if se > 0.0 {
                err / se
            } else if err > 1e-12 {
                f64::INFINITY
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max)
}

const ESTIMATOR_SAMPLES: usize = 100_000;

fn per_trajectory_grads(
    game: &MarkovGame,
    model: &RewardModel,
    y: &TabularPolicy,
    z: &TabularPolicy,
    horizon: usize,
    key: StreamKey,
) -> Result<[Moments; 3]> {
    let rewards = game.reward_table(model);
    let spec = game_spec(game, horizon);
    let batch = sample_batch(game, &rewards, y, z, horizon, ESTIMATOR_SAMPLES, key);
    let mut out = [Moments::new(y.logits().len()), Moments::new(z.logits().len()), Moments::new(game.n_joint())];
    for traj in &batch.trajectories {
        let mut gy = vec![0.0; y.logits().len()];
        let mut gz = vec![0.0; z.logits().len()];
        let mut gx = vec![0.0; game.n_joint()];
        accumulate_policy_grad(game, y, z, traj, spec, Player::Min, 1.0, &mut gy);
        accumulate_policy_grad(game, y, z, traj, spec, Player::Max, 1.0, &mut gz);
        accumulate_grad_x(game, model, traj, game.discount(), 1.0, &mut gx);
        out[0].push(&gy);
        out[1].push(&gz);
        out[2].push(&gx);
    }
    Ok(out)
}

/// Unbiasedness, `1/B` variance scaling and truncation-bias decay of the estimators.
pub fn estimators() -> Result<Vec<CheckResult>> {
    const SUITE: &str = "estimators";
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let game = random_game(4000, 3, 2, 3, 0.9, 0.1)?;
    let model = random_model(&mut rng, &game, 1.0)?;
    let y = random_policy(&mut rng, 3, 2, 1.0);
    let z = random_policy(&mut rng, 3, 3, 1.0);
    let horizon = 5;

    // Unbiasedness against the exact H-truncated gradient.
    let moments = per_trajectory_grads(&game, &model, &y, &z, horizon, StreamKey::new(4000, 0, 0, 0))?;
    let exact = truncated_grad(&game, &model, &y, &z, horizon)?;
    let targets = [exact.min.clone(), exact.max.clone(), exact.incentive(&model)];
    for ((name, m), t) in ["phi", "psi", "x"].iter().zip(&moments).zip(&targets) {
        out.push(CheckResult::new(
            SUITE,
            format!("grad_{name} estimator mean vs exact truncated gradient, {ESTIMATOR_SAMPLES} samples (max |z|)"),
            max_z(m, t, 0.0),
            4.0,
        ));
    }

    // Variance of batch means against single-sample variance / B.
    let single: f64 = moments[0].variance().iter().sum();
    let rewards = game.reward_table(&model);
    let spec = game_spec(&game, horizon);
    for (i, b) in [4usize, 16, 64].into_iter().enumerate() {
        let mut reps = Moments::new(y.logits().len());
        for r in 0..10_000u64 {
            let batch = sample_batch(&game, &rewards, &y, &z, horizon, b, StreamKey::new(4001, i as u64, r, 0));
            let mut g = vec![0.0; y.logits().len()];
            for traj in &batch.trajectories {
                accumulate_policy_grad(&game, &y, &z, traj, spec, Player::Min, 1.0 / b as f64, &mut g);
            }
            reps.push(&g);
        }
        let ratio = b as f64 * reps.variance().iter().sum::<f64>() / single;
        out.push(CheckResult::new(
            SUITE,
            format!("B_J = {b}: B_J Var[batch mean] / Var[single] in [0.8, 1.25] (distance outside)"),
            (0.8 - ratio).max(ratio - 1.25).max(0.0),
            0.0,
        ));
    }

    // Truncation bias decays like gamma^10 between H and H + 10.
    let full = game_gradients(&game, &rewards, &y, &z)?;
    let bias = |h: usize| -> Result<f64> {
        let t = truncated_grad(&game, &model, &y, &z, h)?;
        let d: f64 = t.min.iter().zip(&full.min).chain(t.max.iter().zip(&full.max)).map(|(a, b)| (a - b).powi(2)).sum();
        Ok(d.sqrt())
    };
    let h0 = 20;
    let ratio = bias(h0 + 10)? / bias(h0)? / game.discount().powi(10);
    out.push(CheckResult::new(
        SUITE,
        "truncation bias ratio (H = 30 vs 20) / gamma^10 within factor 3 (log distance outside)".to_string(),
        (ratio.ln().abs() - 3f64.ln()).max(0.0),
        0.0,
    ));

    // Upper-level estimator against finite differences of the exact objective.
    let inst = build_synthetic(&SyntheticSpec::default())?;
    let ul = &inst.ul;
    let (ny, nz) = (inst.game.n_states() * inst.game.n_actions_min(), inst.game.n_states() * inst.game.n_actions_max());
    let ys = random_policy(&mut rng, inst.game.n_states(), inst.game.n_actions_min(), 1.0);
    let zs = random_policy(&mut rng, inst.game.n_states(), inst.game.n_actions_max(), 1.0);
    let ul_batch = sample_batch(ul.dynamics(), ul.costs(), &ys, &zs, ul.spec().horizon, ESTIMATOR_SAMPLES, StreamKey::new(4002, 0, 0, 0));
    let (mut my, mut mz) = (Moments::new(ny), Moments::new(nz));
    for traj in &ul_batch.trajectories {
        let mut gy = vec![0.0; ny];
        let mut gz = vec![0.0; nz];
        accumulate_policy_grad(ul.dynamics(), &ys, &zs, traj, ul.spec(), Player::Min, 1.0, &mut gy);
        accumulate_policy_grad(ul.dynamics(), &ys, &zs, traj, ul.spec(), Player::Max, 1.0, &mut gz);
        my.push(&gy);
        mz.push(&gz);
    }
    let (n, na, nb) = (inst.game.n_states(), inst.game.n_actions_min(), inst.game.n_actions_max());
    let fd_y = central_difference(|l| ul.value_exact(&inst.model, &TabularPolicy::from_logits(n, na, l.to_vec())?, &zs), ys.logits(), 1e-6)?;
    let fd_z = central_difference(|l| ul.value_exact(&inst.model, &ys, &TabularPolicy::from_logits(n, nb, l.to_vec())?), zs.logits(), 1e-6)?;
    out.push(CheckResult::new(
        SUITE,
        "upper-level grad_policies mean vs finite differences (max |z| after 1e-6 slack)",
        max_z(&my, &fd_y, 1e-6).max(max_z(&mz, &fd_z, 1e-6)),
        4.0,
    ));
    Ok(out)
}

/// Non-uniform PL inequalities of the NI gap and of `J` at 50 random points.
pub fn pl() -> Result<Vec<CheckResult>> {
    const SUITE: &str = "pl";
    let (mut worst_g, mut worst_j) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut informative = 0usize;
    for i in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + i);
        let n = rng.gen_range(2..=4);
        let k = rng.gen_range(2..=3);
        let gamma = rng.gen_range(0.5..0.95);
        let game = random_game(5000 + i, n, k, k, gamma, rng.gen_range(0.05..0.5))?;
        let model = random_model(&mut rng, &game, 2.0)?;
        let y = random_policy(&mut rng, n, k, 1.5);
        let z = random_policy(&mut rng, n, k, 1.5);
        let rewards = game.reward_table(&model);
        let ni = ni_gap_table(&game, &rewards, &y, &z)?;
        let grad_min = game_gradients(&game, &rewards, &y, &ni.br_max.policy)?.min;
        let grad_max = game_gradients(&game, &rewards, &ni.br_min.policy, &z)?.max;
        let sq: f64 = grad_min.iter().chain(&grad_max).map(|g| g * g).sum();

        let tau = game.tau_min().min(game.tau_max());
        let rho_min = game.init_dist().iter().cloned().fold(f64::INFINITY, f64::min);
        let pi_min = y.min_prob().min(z.min_prob());
        let mu = (1.0 - gamma) * (tau / n as f64) * rho_min.powi(2) * pi_min.powi(2);
        worst_g = worst_g.max(mu * ni.gap - 0.5 * sq);
        if mu * ni.gap > 1e-9 {
            informative += 1;
        }

        // J as a function of phi (minimized towards J_2) and of psi (maximized towards J_1).
        let here = game_gradients(&game, &rewards, &y, &z)?;
        let mu_y = (1.0 - gamma) * tau * rho_min.powi(2) * y.min_prob().powi(2) / n as f64;
        let mu_z = (1.0 - gamma) * tau * rho_min.powi(2) * z.min_prob().powi(2) / n as f64;
        let sq_y: f64 = here.min.iter().map(|g| g * g).sum();
        let sq_z: f64 = here.max.iter().map(|g| g * g).sum();
        worst_j = worst_j
            .max(mu_y * (here.value - ni.j2) - 0.5 * sq_y)
            .max(mu_z * (ni.j1 - here.value) - 0.5 * sq_z);
    }
    Ok(vec![
        CheckResult::new(SUITE, format!("NI gap: mu g - |grad g|^2 / 2 at 50 points ({informative} with mu g > 1e-9)"), worst_g, 1e-9),
        CheckResult::new(SUITE, "J: mu_J (J - J*) - |grad J|^2 / 2 at 50 points, both players", worst_j, 1e-9),
    ])
}
