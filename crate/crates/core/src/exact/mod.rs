//! Exact dynamic programming for the entropy-regularized game.
//!
//! Every routine here is deterministic and solves its problem to a stated
//! tolerance; the stochastic estimators in [`crate::sampling`] are tested
//! against these.

mod best_response;
mod gradients;
pub(crate) mod linalg;
mod nash;
mod saddle;

pub use best_response::{best_response, best_response_table, ni_gap, ni_gap_detail, ni_gap_table, BestResponse, NiGap, SoftMdp};
pub use gradients::{
    exact_grad, game_gradients, horizon_gradients, truncated_grad, GameGradients, GradTarget, HorizonSpec,
};
pub use nash::{solve_ne, solve_ne_table, solve_ne_with, NashSolution, NeOptions};
pub use saddle::{
    saddle_kkt_residual, saddle_objective, solve_state_saddle, solve_state_saddle_warm, StateSaddle, SADDLE_TOL,
};

use std::ops::Deref;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::game::{MarkovGame, RewardModel, TabularPolicy};

/// States above which per-state work in an operator application is spread over threads.
const PAR_STATES: usize = 128;

/// State-value vector of the regularized game.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueVector(pub Vec<f64>);

impl ValueVector {
    /// `sum_s rho(s) v(s)`.
    pub fn expectation(&self, rho: &[f64]) -> f64 {
        self.0.iter().zip(rho).map(|(v, p)| v * p).sum()
    }

    pub fn sup_distance(&self, other: &[f64]) -> f64 {
        sup_distance(&self.0, other)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ValueVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

pub(crate) fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Bound on `|V|` implied by bounded rewards and entropies.
pub fn value_bound(game: &MarkovGame, reward_bound: f64) -> f64 {
    let log_a = (game.n_actions_min() as f64).ln();
    let log_b = (game.n_actions_max() as f64).ln();
    (reward_bound + (game.tau_min() + game.tau_max()) * log_a.max(log_b)) / (1.0 - game.discount())
}

pub(crate) fn check_policies(game: &MarkovGame, min: &TabularPolicy, max: &TabularPolicy) -> Result<()> {
    for (p, n, who) in [(min, game.n_actions_min(), "min"), (max, game.n_actions_max(), "max")] {
        if p.n_states() != game.n_states() || p.n_actions() != n {
            return Err(Error::InvalidPolicy(format!(
                "{who} policy is {}x{}, game expects {}x{n}",
                p.n_states(),
                p.n_actions(),
                game.n_states()
            )));
        }
    }
    Ok(())
}

pub(crate) fn check_table(game: &MarkovGame, rewards: &[f64]) -> Result<()> {
    if rewards.len() != game.n_joint() {
        return Err(Error::InvalidConfig(format!(
            "reward table has {} entries, game has {} joint indices",
            rewards.len(),
            game.n_joint()
        )));
    }
    Ok(())
}

pub(crate) fn check_values(game: &MarkovGame, v: &[f64]) -> Result<()> {
    if v.len() != game.n_states() {
        return Err(Error::InvalidConfig(format!("value vector has {} entries, expected {}", v.len(), game.n_states())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("value vector".into()));
    }
    Ok(())
}

/// Entropy regularizer `-tau_min H(y_s) + tau_max H(z_s)`; zero at absorbing states.
pub fn regularizer(game: &MarkovGame, min: &TabularPolicy, max: &TabularPolicy, s: usize) -> f64 {
    if game.is_absorbing(s) {
        return 0.0;
    }
    -game.tau_min() * min.entropy(s) + game.tau_max() * max.entropy(s)
}

/// `Q(s, a, b) = r(s, a, b) + gamma E[v(s')]` over all joint indices.
pub fn q_table(game: &MarkovGame, rewards: &[f64], v: &[f64]) -> Vec<f64> {
    let (na, nb) = (game.n_actions_min(), game.n_actions_max());
    let gamma = game.discount();
    let mut q = Vec::with_capacity(game.n_joint());
    for s in 0..game.n_states() {
        for a in 0..na {
            for b in 0..nb {
                q.push(rewards[game.joint_index(s, a, b)] + gamma * game.expected_next(s, a, b, v));
            }
        }
    }
    q
}

/// Policy-averaged one-step reward plus regularizer, and the joint kernel, per state.
fn policy_chain(game: &MarkovGame, rewards: &[f64], min: &TabularPolicy, max: &TabularPolicy) -> (Vec<f64>, DMatrix<f64>) {
    let n = game.n_states();
    let mut r = vec![0.0; n];
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        let (y, z) = (min.row(s), max.row(s));
        let mut acc = 0.0;
        for (a, ya) in y.iter().enumerate() {
            for (b, zb) in z.iter().enumerate() {
                let w = ya * zb;
                acc += w * rewards[game.joint_index(s, a, b)];
                let (next, prob) = game.successors(s, a, b);
                for (&sp, &pr) in next.iter().zip(prob) {
                    p[(s, sp)] += w * pr;
                }
            }
        }
        r[s] = acc + regularizer(game, min, max, s);
    }
    (r, p)
}

/// Exact regularized value `V^{phi, psi}` by a direct linear solve.
pub fn policy_eval(game: &MarkovGame, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy) -> Result<ValueVector> {
    policy_eval_table(game, &game.reward_table(model), min, max)
}

/// [`policy_eval`] for an explicit reward table (absorbing entries are ignored).
pub fn policy_eval_table(game: &MarkovGame, rewards: &[f64], min: &TabularPolicy, max: &TabularPolicy) -> Result<ValueVector> {
    check_policies(game, min, max)?;
    check_table(game, rewards)?;
    let n = game.n_states();
    let (mut r, p) = policy_chain(game, rewards, min, max);
    let mut m = DMatrix::identity(n, n) - p * game.discount();
    // Absorbing states are pinned to zero.
    for s in (0..n).filter(|&s| game.is_absorbing(s)) {
        for j in 0..n {
            m[(s, j)] = if j == s { 1.0 } else { 0.0 };
        }
        r[s] = 0.0;
    }
    Ok(ValueVector(linalg::solve_dense(m, r, "policy evaluation")?))
}

/// `J(x, phi, psi) = rho . V^{phi, psi}`.
pub fn joint_value(game: &MarkovGame, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy) -> Result<f64> {
    Ok(policy_eval(game, model, min, max)?.expectation(game.init_dist()))
}

/// Policy Bellman operator `T_{y,z,h} v`.
pub fn policy_bellman(
    game: &MarkovGame,
    model: &RewardModel,
    min: &TabularPolicy,
    max: &TabularPolicy,
    v: &[f64],
) -> Result<ValueVector> {
    policy_bellman_table(game, &game.reward_table(model), min, max, v)
}

pub fn policy_bellman_table(
    game: &MarkovGame,
    rewards: &[f64],
    min: &TabularPolicy,
    max: &TabularPolicy,
    v: &[f64],
) -> Result<ValueVector> {
    check_policies(game, min, max)?;
    check_table(game, rewards)?;
    check_values(game, v)?;
    let gamma = game.discount();
    let out = (0..game.n_states())
        .map(|s| {
            if game.is_absorbing(s) {
                return gamma * v[s];
            }
            let (y, z) = (min.row(s), max.row(s));
            let mut acc = 0.0;
            for (a, ya) in y.iter().enumerate() {
                for (b, zb) in z.iter().enumerate() {
                    acc += ya * zb * (rewards[game.joint_index(s, a, b)] + gamma * game.expected_next(s, a, b, v));
                }
            }
            acc + regularizer(game, min, max, s)
        })
        .collect();
    Ok(ValueVector(out))
}

/// Soft min-max Bellman optimality operator `T_{*,h} v`.
pub fn soft_bellman_optimality(game: &MarkovGame, model: &RewardModel, v: &[f64]) -> Result<ValueVector> {
    let rewards = game.reward_table(model);
    check_values(game, v)?;
    let (out, _) = soft_bellman_step(game, &rewards, v, None)?;
    Ok(ValueVector(out))
}

/// One application of `T_{*,h}` returning the per-state saddles.
/// Absorbing states map to `gamma v(s)` with a uniform placeholder saddle.
pub(crate) fn soft_bellman_step(
    game: &MarkovGame,
    rewards: &[f64],
    v: &[f64],
    warm: Option<&[StateSaddle]>,
) -> Result<(Vec<f64>, Vec<StateSaddle>)> {
    let (na, nb) = (game.n_actions_min(), game.n_actions_max());
    let gamma = game.discount();
    let solve = |s: usize| -> Result<(f64, StateSaddle)> {
        if game.is_absorbing(s) {
            return Ok((gamma * v[s], uniform_saddle(na, nb)));
        }
        let mut q = Vec::with_capacity(na * nb);
        for a in 0..na {
            for b in 0..nb {
                q.push(rewards[game.joint_index(s, a, b)] + gamma * game.expected_next(s, a, b, v));
            }
        }
        let warm_log_y = warm.map(|w| w[s].log_y());
        let saddle = solve_state_saddle_warm(&q, na, nb, game.tau_min(), game.tau_max(), warm_log_y)?;
        Ok((saddle.value, saddle))
    };
    let results: Vec<Result<(f64, StateSaddle)>> = if game.n_states() >= PAR_STATES {
        (0..game.n_states()).into_par_iter().map(solve).collect()
    } else {
        (0..game.n_states()).map(solve).collect()
    };
    let mut values = Vec::with_capacity(game.n_states());
    let mut saddles = Vec::with_capacity(game.n_states());
    for r in results {
        let (val, sad) = r?;
        values.push(val);
        saddles.push(sad);
    }
    Ok((values, saddles))
}

fn uniform_saddle(na: usize, nb: usize) -> StateSaddle {
    StateSaddle {
        y: vec![1.0 / na as f64; na],
        z: vec![1.0 / nb as f64; nb],
        value: 0.0,
        log_y: vec![-(na as f64).ln(); na],
        log_z: vec![-(nb as f64).ln(); nb],
    }
}

/// Normalized discounted state visitation `d = (1 - gamma) rho^T (I - gamma P_{y,z})^{-1}`.
pub fn visitation(game: &MarkovGame, min: &TabularPolicy, max: &TabularPolicy) -> Result<Vec<f64>> {
    check_policies(game, min, max)?;
    let n = game.n_states();
    let zeros = vec![0.0; game.n_joint()];
    let (_, p) = policy_chain(game, &zeros, min, max);
    let m = DMatrix::identity(n, n) - p.transpose() * game.discount();
    let rhs = game.init_dist().iter().map(|r| (1.0 - game.discount()) * r).collect();
    linalg::solve_dense(m, rhs, "visitation")
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::test_games::random_game;
    use crate::game::GameParts;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single_state(n_min: usize, n_max: usize, discount: f64, tau: f64, reward: Vec<f64>) -> (MarkovGame, RewardModel) {
        let n = n_min * n_max;
        let game = MarkovGame::new(GameParts {
            n_states: 1,
            n_actions_min: n_min,
            n_actions_max: n_max,
            discount,
            tau_min: tau,
            tau_max: tau,
            init_dist: vec![1.0],
            base_reward: reward,
            absorbing: vec![false],
            transitions: vec![vec![(0, 1.0)]; n],
        })
        .unwrap();
        let model = RewardModel::for_game(&game, 0.0).unwrap();
        (game, model)
    }

    #[test]
    fn uniform_policies_with_balanced_entropy_have_zero_value() {
        let (g, m) = single_state(3, 3, 0.9, 0.2, vec![0.0; 9]);
        let v = policy_eval(&g, &m, &TabularPolicy::uniform(1, 3), &TabularPolicy::uniform(1, 3)).unwrap();
        assert!(v[0].abs() < 1e-14);
    }

    #[test]
    fn geometric_series_of_constant_regularizer() {
        let (g, m) = single_state(2, 3, 0.5, 0.1, vec![0.0; 6]);
        let v = policy_eval(&g, &m, &TabularPolicy::uniform(1, 2), &TabularPolicy::uniform(1, 3)).unwrap();
        assert_relative_eq!(v[0], 0.1 * (3f64.ln() - 2f64.ln()) / 0.5, epsilon = 1e-14);
        assert_relative_eq!(v[0], 0.0810930, epsilon = 1e-7);
    }

    #[test]
    fn policy_eval_matches_power_iteration() {
        let g = random_game(3, 3, 2, 2, 0.9, 0.1);
        let m = RewardModel::for_game(&g, 1.0).unwrap();
        let y = TabularPolicy::uniform(3, 2);
        let z = TabularPolicy::uniform(3, 2);
        let v = policy_eval(&g, &m, &y, &z).unwrap();
        let oracle = oracles::power_iteration(&g, &g.reward_table(&m), &y, &z, 1_000_000);
        assert!(v.sup_distance(&oracle) < 1e-9);
    }

    #[test]
    fn optimality_operator_on_matrix_games() {
        // gamma is irrelevant once v = 0; Q reduces to the reward matrix.
        let (g, m) = single_state(2, 2, 0.5, 1.0, vec![1.0, 0.0, 0.0, 1.0]);
        let out = soft_bellman_optimality(&g, &m, &[0.0]).unwrap();
        assert_relative_eq!(out[0], 0.5, epsilon = 1e-12);

        let (g, m) = single_state(2, 2, 0.5, 0.5, vec![1.0, 0.0, 0.0, 0.0]);
        let out = soft_bellman_optimality(&g, &m, &[0.0]).unwrap();
        let grid = grid_search_value(&[1.0, 0.0, 0.0, 0.0], 0.5, 0.5);
        assert!((out[0] - grid).abs() < 1e-3, "{} vs {}", out[0], grid);
    }

    #[test]
    fn saddle_matches_grid_search() {
        let q = [1.0, -1.0, -1.0, 1.0];
        let s = solve_state_saddle(&q, 2, 2, 0.1, 0.1).unwrap();
        let grid = grid_search_value(&q, 0.1, 0.1);
        assert!((s.value - grid).abs() < 1e-3, "{} vs {}", s.value, grid);
    }

    /// `min_y max_z` over a 1e-4 grid of both 2-simplices.
    fn grid_search_value(q: &[f64], tau_min: f64, tau_max: f64) -> f64 {
        let ent = |p: f64| {
            let f = |x: f64| if x > 0.0 { -x * x.ln() } else { 0.0 };
            f(p) + f(1.0 - p)
        };
        let n = 10_000;
        // Inner max over z for a fixed y is concave in z; scan it fully.
        let inner: Vec<f64> = (0..=n).map(|j| j as f64 / n as f64).collect();
        let inner_ent: Vec<f64> = inner.iter().map(|&p| ent(p)).collect();
        (0..=n)
            .map(|i| {
                let y = i as f64 / n as f64;
                let c0 = y * q[0] + (1.0 - y) * q[2];
                let c1 = y * q[1] + (1.0 - y) * q[3];
                let best = inner
                    .iter()
                    .zip(&inner_ent)
                    .map(|(&z, &h)| z * c0 + (1.0 - z) * c1 + tau_max * h)
                    .fold(f64::NEG_INFINITY, f64::max);
                best - tau_min * ent(y)
            })
            .fold(f64::INFINITY, f64::min)
    }

    fn random_values(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| scale * (2.0 * rng.gen::<f64>() - 1.0)).collect()
    }

    fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> TabularPolicy {
        TabularPolicy::from_logits(ns, na, (0..ns * na).map(|_| 3.0 * rng.gen::<f64>() - 1.5).collect()).unwrap()
    }

    #[test]
    fn operators_are_monotone_contractions() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10 {
            let g = random_game(seed, 4, 2, 3, 0.9, 0.3);
            let m = RewardModel::for_game(&g, 1.0).unwrap();
            let (y, z) = (random_policy(&mut rng, 4, 2), random_policy(&mut rng, 4, 3));
            let v1 = random_values(&mut rng, 4, 5.0);
            let v2 = random_values(&mut rng, 4, 5.0);
            let d = sup_distance(&v1, &v2);
            let t1 = soft_bellman_optimality(&g, &m, &v1).unwrap();
            let t2 = soft_bellman_optimality(&g, &m, &v2).unwrap();
            assert!(t1.sup_distance(&t2) <= 0.9 * d + 1e-10);
            let p1 = policy_bellman(&g, &m, &y, &z, &v1).unwrap();
            let p2 = policy_bellman(&g, &m, &y, &z, &v2).unwrap();
            assert!(p1.sup_distance(&p2) <= 0.9 * d + 1e-10);

            let hi: Vec<f64> = v1.iter().map(|v| v + rng.gen::<f64>()).collect();
            let th = soft_bellman_optimality(&g, &m, &hi).unwrap();
            assert!(t1.iter().zip(th.iter()).all(|(a, b)| *a <= b + 1e-10));

            let c = 3.7;
            let shifted: Vec<f64> = v1.iter().map(|v| v + c).collect();
            let ts = soft_bellman_optimality(&g, &m, &shifted).unwrap();
            for (a, b) in ts.iter().zip(t1.iter()) {
                assert!((a - b - 0.9 * c).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn absorbing_states_map_to_discounted_self() {
        let g = MarkovGame::new(GameParts {
            n_states: 2,
            n_actions_min: 2,
            n_actions_max: 2,
            discount: 0.8,
            tau_min: 0.1,
            tau_max: 0.1,
            init_dist: vec![1.0, 0.0],
            base_reward: vec![1.0; 8],
            absorbing: vec![false, true],
            transitions: vec![vec![(1, 1.0)]; 8],
        })
        .unwrap();
        let m = RewardModel::for_game(&g, 0.0).unwrap();
        let out = soft_bellman_optimality(&g, &m, &[2.0, 5.0]).unwrap();
        assert_relative_eq!(out[1], 4.0, epsilon = 1e-15);
        let v = policy_eval(&g, &m, &TabularPolicy::uniform(2, 2), &TabularPolicy::uniform(2, 2)).unwrap();
        assert_eq!(v[1], 0.0);
        assert_relative_eq!(v[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn visitation_is_a_distribution() {
        let g = random_game(9, 4, 2, 2, 0.95, 0.1);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = visitation(&g, &random_policy(&mut rng, 4, 2), &random_policy(&mut rng, 4, 2)).unwrap();
        assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-10);
        assert!(d.iter().all(|p| *p >= 0.0));

        let tiny = g.with_discount(1e-12).unwrap();
        let d = visitation(&tiny, &TabularPolicy::uniform(4, 2), &TabularPolicy::uniform(4, 2)).unwrap();
        for (a, b) in d.iter().zip(g.init_dist()) {
            assert!((a - b).abs() < 1e-10);
        }

        let (one, _) = single_state(2, 2, 0.9, 0.1, vec![0.0; 4]);
        let d = visitation(&one, &TabularPolicy::uniform(1, 2), &TabularPolicy::uniform(1, 2)).unwrap();
        assert_relative_eq!(d[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn visitation_matches_monte_carlo_on_a_chain() {
        // 4-state chain: drift right with probability depending on the joint action.
        let n: usize = 4;
        let mut transitions = Vec::new();
        for s in 0..n {
            for a in 0..2 {
                for b in 0..2 {
                    let right = 0.3 + 0.2 * (a + b) as f64;
                    let up = (s + 1).min(n - 1);
                    let mut row = vec![(up, right), (s.saturating_sub(1), 1.0 - right)];
                    if up == s.saturating_sub(1) {
                        row = vec![(up, 1.0)];
                    }
                    transitions.push(row);
                }
            }
        }
        let g = MarkovGame::new(GameParts {
            n_states: n,
            n_actions_min: 2,
            n_actions_max: 2,
            discount: 0.8,
            tau_min: 0.1,
            tau_max: 0.1,
            init_dist: vec![0.4, 0.3, 0.2, 0.1],
            base_reward: vec![0.0; n * 4],
            absorbing: vec![false; n],
            transitions,
        })
        .unwrap();
        let y = TabularPolicy::from_logits(n, 2, vec![0.3, -0.2, 0.0, 0.5, 1.0, 0.0, -0.4, 0.1]).unwrap();
        let z = TabularPolicy::from_logits(n, 2, vec![0.0, 0.7, -0.3, 0.2, 0.5, 0.5, 0.0, -1.0]).unwrap();
        let d = visitation(&g, &y, &z).unwrap();

        // Geometric stopping with continuation gamma gives an unbiased draw from d.
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 1_000_000;
        let mut counts = vec![0usize; n];
        let sample = |rng: &mut ChaCha8Rng, p: &[f64]| {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, q) in p.iter().enumerate() {
                acc += q;
                if u < acc {
                    return i;
                }
            }
            p.len() - 1
        };
        for _ in 0..draws {
            let mut s = sample(&mut rng, g.init_dist());
            while rng.gen::<f64>() < g.discount() {
                let a = sample(&mut rng, y.row(s));
                let b = sample(&mut rng, z.row(s));
                s = sample(&mut rng, &g.transition_row(s, a, b));
            }
            counts[s] += 1;
        }
        for s in 0..n {
            let p_hat = counts[s] as f64 / draws as f64;
            let se = (p_hat * (1.0 - p_hat) / draws as f64).sqrt();
            assert!((p_hat - d[s]).abs() <= 3.0 * se + 1e-12, "state {s}: {p_hat} vs {}", d[s]);
        }
    }

    #[test]
    fn value_bound_holds() {
        let g = random_game(4, 5, 3, 3, 0.95, 0.4);
        let m = RewardModel::for_game(&g, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let v = policy_eval(&g, &m, &random_policy(&mut rng, 5, 3), &random_policy(&mut rng, 5, 3)).unwrap();
        let bound = value_bound(&g, m.bound());
        assert!(v.iter().all(|x| x.abs() <= bound));
    }
}
