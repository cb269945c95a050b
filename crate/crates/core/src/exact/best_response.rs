use nalgebra::DMatrix;

use super::saddle::{log_softmax_into, soft_max};
use super::{check_table, linalg, sup_distance, ValueVector};
use crate::error::{Error, Result};
use crate::game::{MarkovGame, Player, RewardModel, TabularPolicy};

const VI_TOL: f64 = 1e-7;
const VI_MAX_ITERS: usize = 500_000;
const PI_MAX_ITERS: usize = 100;

/// Single-agent entropy-regularized MDP, maximized:
/// `V(s) = max_pi sum_k pi(k) (r(s,k) + gamma E[V(s')]) + tau H(pi)`.
#[derive(Clone, Debug)]
pub struct SoftMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: f64,
    pub tau: f64,
    pub reward: Vec<f64>,
    /// Sparse successor rows, one per `(s, k)`.
    pub transitions: Vec<Vec<(usize, f64)>>,
    pub absorbing: Vec<bool>,
}

impl SoftMdp {
    /// Folds the fixed opponent into the game. For a max-player responder the
    /// reward is `E_a r - tau_min H(y)`; for the min player it is
    /// `-(E_b r + tau_max H(z))`, so both are maximization problems.
    pub fn reduce(game: &MarkovGame, rewards: &[f64], fixed: &TabularPolicy, responder: Player) -> Result<Self> {
        check_table(game, rewards)?;
        let opponent = responder.opponent();
        if fixed.n_states() != game.n_states() || fixed.n_actions() != game.n_actions(opponent) {
            return Err(Error::InvalidPolicy("fixed policy does not match the opponent's action set".into()));
        }
        let n = game.n_states();
        let nk = game.n_actions(responder);
        let mut reward = vec![0.0; n * nk];
        let mut transitions = Vec::with_capacity(n * nk);
        let mut dense = vec![0.0; n];
        let mut touched = Vec::new();
        for s in 0..n {
            let w = fixed.row(s);
            let opp_reg = if game.is_absorbing(s) { 0.0 } else { game.tau(opponent) * fixed.entropy(s) };
            for k in 0..nk {
                let mut r = 0.0;
                for (o, wo) in w.iter().enumerate() {
                    let (a, b) = match responder {
                        Player::Max => (o, k),
                        Player::Min => (k, o),
                    };
                    r += wo * rewards[game.joint_index(s, a, b)];
                    let (next, prob) = game.successors(s, a, b);
                    for (&sp, &p) in next.iter().zip(prob) {
                        if dense[sp] == 0.0 {
                            touched.push(sp);
                        }
                        dense[sp] += wo * p;
                    }
                }
                reward[s * nk + k] = if game.is_absorbing(s) {
                    0.0
                } else {
                    match responder {
                        Player::Max => r - opp_reg,
                        Player::Min => -(r + opp_reg),
                    }
                };
                touched.sort_unstable();
                let row: Vec<(usize, f64)> = touched.iter().map(|&sp| (sp, dense[sp])).filter(|(_, p)| *p > 0.0).collect();
                for &sp in &touched {
                    dense[sp] = 0.0;
                }
                touched.clear();
                transitions.push(row);
            }
        }
        Ok(Self {
            n_states: n,
            n_actions: nk,
            discount: game.discount(),
            tau: game.tau(responder),
            reward,
            transitions,
            absorbing: game.absorbing().to_vec(),
        })
    }

    fn q_row(&self, s: usize, v: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            let idx = s * self.n_actions + k;
            let ev: f64 = self.transitions[idx].iter().map(|&(sp, p)| p * v[sp]).sum();
            *o = self.reward[idx] + self.discount * ev;
        }
    }

    /// Softmax Bellman operator.
    pub fn bellman(&self, v: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.n_actions];
        (0..self.n_states)
            .map(|s| {
                if self.absorbing[s] {
                    return 0.0;
                }
                self.q_row(s, v, &mut q);
                soft_max(&q, self.tau)
            })
            .collect()
    }

    /// Greedy softmax policy logits (normalized log-probabilities) for `v`.
    pub fn greedy_log_policy(&self, v: &[f64]) -> Vec<f64> {
        let nk = self.n_actions;
        let mut out = vec![-(nk as f64).ln(); self.n_states * nk];
        let mut q = vec![0.0; nk];
        for s in (0..self.n_states).filter(|&s| !self.absorbing[s]) {
            self.q_row(s, v, &mut q);
            let scaled: Vec<f64> = q.iter().map(|x| x / self.tau).collect();
            log_softmax_into(&scaled, &mut out[s * nk..(s + 1) * nk]);
        }
        out
    }

    /// Exact regularized value of a (log-)policy by a dense solve.
    pub fn evaluate(&self, log_pi: &[f64]) -> Result<Vec<f64>> {
        let n = self.n_states;
        let nk = self.n_actions;
        let mut m = DMatrix::identity(n, n);
        let mut rhs = vec![0.0; n];
        for s in (0..n).filter(|&s| !self.absorbing[s]) {
            let mut acc = 0.0;
            for k in 0..nk {
                let lp = log_pi[s * nk + k];
                let p = lp.exp();
                if p == 0.0 {
                    continue;
                }
                acc += p * (self.reward[s * nk + k] - self.tau * lp);
                for &(sp, pr) in &self.transitions[s * nk + k] {
                    m[(s, sp)] -= self.discount * p * pr;
                }
            }
            rhs[s] = acc;
        }
        linalg::solve_dense(m, rhs, "soft MDP evaluation")
    }

    /// Optimal values and log-policy: soft value iteration to a coarse
    /// tolerance, then soft policy iteration with exact evaluation.
    pub fn solve(&self) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let mut v = vec![0.0; self.n_states];
        let stop = VI_TOL * (1.0 - self.discount) / self.discount;
        let mut iters = 0;
        loop {
            let next = self.bellman(&v);
            let res = sup_distance(&next, &v);
            v = next;
            iters += 1;
            if res <= stop {
                break;
            }
            if iters >= VI_MAX_ITERS || !res.is_finite() {
                return Err(Error::NoConvergence {
                    what: "soft value iteration",
                    iterations: iters,
                    residual: res,
                });
            }
        }
        let mut log_pi = self.greedy_log_policy(&v);
        let mut values = self.evaluate(&log_pi)?;
        for _ in 0..PI_MAX_ITERS {
            iters += 1;
            let candidate = self.greedy_log_policy(&values);
            let next = self.evaluate(&candidate)?;
            let scale = 1.0 + values.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            let gain = next.iter().zip(&values).fold(f64::NEG_INFINITY, |m, (a, b)| m.max(a - b));
            // Policy improvement is monotone; stop once it stalls at round-off,
            // whose level grows with the size of the dense solve.
            if gain <= 4.0 * f64::EPSILON * self.n_states as f64 * scale {
                if next.iter().zip(&values).all(|(a, b)| a >= b) {
                    log_pi = candidate;
                    values = next;
                }
                break;
            }
            log_pi = candidate;
            values = next;
        }
        Ok((values, log_pi, iters))
    }
}

/// Best response of `responder` against a fixed opponent policy.
#[derive(Clone, Debug)]
pub struct BestResponse {
    pub responder: Player,
    pub policy: TabularPolicy,
    /// State values of the game under (best response, fixed policy), in the game's sign.
    pub values: ValueVector,
    /// `J_1(x, phi) = max_psi J` for a max responder, `J_2(x, psi) = min_phi J` for a min responder.
    pub value: f64,
    pub iterations: usize,
}

pub fn best_response(game: &MarkovGame, model: &RewardModel, fixed: &TabularPolicy, responder: Player) -> Result<BestResponse> {
    best_response_table(game, &game.reward_table(model), fixed, responder)
}

pub fn best_response_table(game: &MarkovGame, rewards: &[f64], fixed: &TabularPolicy, responder: Player) -> Result<BestResponse> {
    let mdp = SoftMdp::reduce(game, rewards, fixed, responder)?;
    let (values, log_pi, iterations) = mdp.solve()?;
    let values: Vec<f64> = match responder {
        Player::Max => values,
        Player::Min => values.into_iter().map(|v| -v).collect(),
    };
    let policy = TabularPolicy::from_logits(game.n_states(), game.n_actions(responder), log_pi)?;
    let values = ValueVector(values);
    let value = values.expectation(game.init_dist());
    Ok(BestResponse {
        responder,
        policy,
        values,
        value,
        iterations,
    })
}

/// Nikaido-Isoda gap with both best responses.
#[derive(Clone, Debug)]
pub struct NiGap {
    pub gap: f64,
    /// `max_psi' J(x, phi, psi')`.
    pub j1: f64,
    /// `min_phi' J(x, phi', psi)`.
    pub j2: f64,
    pub br_max: BestResponse,
    pub br_min: BestResponse,
}

pub fn ni_gap(game: &MarkovGame, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy) -> Result<f64> {
    Ok(ni_gap_detail(game, model, min, max)?.gap)
}

pub fn ni_gap_detail(game: &MarkovGame, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy) -> Result<NiGap> {
    ni_gap_table(game, &game.reward_table(model), min, max)
}

pub fn ni_gap_table(game: &MarkovGame, rewards: &[f64], min: &TabularPolicy, max: &TabularPolicy) -> Result<NiGap> {
    super::check_policies(game, min, max)?;
    let br_max = best_response_table(game, rewards, min, Player::Max)?;
    let br_min = best_response_table(game, rewards, max, Player::Min)?;
    Ok(NiGap {
        gap: br_max.value - br_min.value,
        j1: br_max.value,
        j2: br_min.value,
        br_max,
        br_min,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::oracles::{dense_soft_vi_max, dense_soft_vi_min};
    use crate::exact::{policy_eval, solve_state_saddle};
    use crate::game::test_games::random_game;
    use crate::game::GameParts;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> TabularPolicy {
        TabularPolicy::from_logits(ns, na, (0..ns * na).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect()).unwrap()
    }

    #[test]
    fn zero_reward_best_response_is_uniform() {
        let g = random_game(1, 3, 3, 3, 0.9, 0.1).with_base_reward(vec![0.0; 27]).unwrap();
        let m = RewardModel::for_game(&g, 0.0).unwrap();
        let fixed = TabularPolicy::uniform(3, 3);
        for who in [Player::Min, Player::Max] {
            let br = best_response(&g, &m, &fixed, who).unwrap();
            for p in br.policy.prob_table() {
                assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn one_state_best_response_is_conditional_softmax() {
        // gamma is tiny so the one-state problem is a single matrix game round.
        let q = [0.3, -0.7, 1.1, 0.4, 0.0, -0.2];
        let g = MarkovGame::new(GameParts {
            n_states: 1,
            n_actions_min: 2,
            n_actions_max: 3,
            discount: 1e-9,
            tau_min: 0.2,
            tau_max: 0.3,
            init_dist: vec![1.0],
            base_reward: q.to_vec(),
            absorbing: vec![false],
            transitions: vec![vec![(0, 1.0)]; 6],
        })
        .unwrap();
        let m = RewardModel::for_game(&g, 0.0).unwrap();
        let y = TabularPolicy::from_logits(1, 2, vec![0.4, -0.1]).unwrap();
        let br = best_response(&g, &m, &y, Player::Max).unwrap();
        let s: Vec<f64> = (0..3).map(|b| (0..2).map(|a| y.row(0)[a] * q[a * 3 + b]).sum::<f64>() / 0.3).collect();
        let zmax = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm: f64 = s.iter().map(|v| (v - zmax).exp()).sum();
        for b in 0..3 {
            assert!((br.policy.row(0)[b] - (s[b] - zmax).exp() / norm).abs() < 1e-8);
        }
        let sad = solve_state_saddle(&q, 2, 3, 0.2, 0.3).unwrap();
        let ys = TabularPolicy::from_probs(1, 2, &sad.y).unwrap();
        let br = best_response(&g, &m, &ys, Player::Max).unwrap();
        for b in 0..3 {
            assert!((br.policy.row(0)[b] - sad.z[b]).abs() < 1e-8);
        }
    }

    #[test]
    fn best_response_value_matches_its_policy() {
        let g = random_game(4, 4, 2, 3, 0.95, 0.1);
        let m = RewardModel::for_game(&g, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let y = random_policy(&mut rng, 4, 2);
        let br = best_response(&g, &m, &y, Player::Max).unwrap();
        let v = policy_eval(&g, &m, &y, &br.policy).unwrap();
        assert!(v.sup_distance(&br.values) < 1e-10);
    }

    #[test]
    fn gap_matches_independent_dense_solvers() {
        let g = random_game(31, 3, 2, 2, 0.9, 0.1);
        let m = RewardModel::for_game(&g, 1.0).unwrap();
        let u = TabularPolicy::uniform(3, 2);
        let detail = ni_gap_detail(&g, &m, &u, &u).unwrap();
        let rewards = g.reward_table(&m);
        let j1 = dense_soft_vi_max(&g, &rewards, &u, 1e-12);
        let j2 = dense_soft_vi_min(&g, &rewards, &u, 1e-12);
        assert!((detail.j1 - j1).abs() < 1e-9, "{} vs {j1}", detail.j1);
        assert!((detail.j2 - j2).abs() < 1e-9, "{} vs {j2}", detail.j2);
        assert!((detail.gap - (j1 - j2)).abs() < 2e-9);
    }

    #[test]
    fn gap_is_nonnegative_at_random_policies() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for seed in 0..10 {
            let g = random_game(seed, 4, 3, 2, 0.9, 0.2);
            let m = RewardModel::for_game(&g, 1.0).unwrap();
            let gap = ni_gap(&g, &m, &random_policy(&mut rng, 4, 3), &random_policy(&mut rng, 4, 2)).unwrap();
            assert!(gap >= -1e-8);
        }
    }
}
