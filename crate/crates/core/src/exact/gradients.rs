use super::{check_policies, check_table, policy_eval_table, q_table, visitation, ValueVector};
use crate::error::{Error, Result};
use crate::game::{MarkovGame, RewardModel, TabularPolicy};

/// Which parameter block to differentiate `J(x, phi, psi)` with respect to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    /// Incentive parameters `x`.
    Incentive,
    /// Min-player logits `phi`.
    Min,
    /// Max-player logits `psi`.
    Max,
}

/// Value of a policy pair and its gradients with respect to the reward table
/// and both logit tables.
#[derive(Clone, Debug)]
pub struct GameGradients {
    pub value: f64,
    pub values: ValueVector,
    /// `dJ / dr(s, a, b)`.
    pub reward: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl GameGradients {
    /// Chains `dJ/dr` with `dr/dx` of the model.
    pub fn incentive(&self, model: &RewardModel) -> Vec<f64> {
        self.reward.iter().enumerate().map(|(i, g)| g * model.slope(i)).collect()
    }

    pub fn get(&self, model: &RewardModel, wrt: GradTarget) -> Vec<f64> {
        match wrt {
            GradTarget::Incentive => self.incentive(model),
            GradTarget::Min => self.min.clone(),
            GradTarget::Max => self.max.clone(),
        }
    }
}

/// Accumulates `weight * grad log pi . W` into the logit gradients at state `s`,
/// where `w` is the row-major `(a, b)` weight table of that state.
fn accumulate_policy_terms(
    weight: f64,
    y: &[f64],
    z: &[f64],
    w: &[f64],
    grad_min: &mut [f64],
    grad_max: &mut [f64],
) {
    let (na, nb) = (y.len(), z.len());
    let w_min: Vec<f64> = (0..na).map(|a| (0..nb).map(|b| z[b] * w[a * nb + b]).sum()).collect();
    let w_max: Vec<f64> = (0..nb).map(|b| (0..na).map(|a| y[a] * w[a * nb + b]).sum()).collect();
    let mean_min: f64 = y.iter().zip(&w_min).map(|(p, v)| p * v).sum();
    let mean_max: f64 = z.iter().zip(&w_max).map(|(p, v)| p * v).sum();
    for a in 0..na {
        grad_min[a] += weight * y[a] * (w_min[a] - mean_min);
    }
    for b in 0..nb {
        grad_max[b] += weight * z[b] * (w_max[b] - mean_max);
    }
}

/// `W(s, a, b) = Q - tau_max log z_b + tau_min log y_a`, or plain `Q` when unregularized.
fn weight_table(
    game: &MarkovGame,
    min: &TabularPolicy,
    max: &TabularPolicy,
    s: usize,
    q_s: &[f64],
    regularized: bool,
) -> Vec<f64> {
    let (na, nb) = (game.n_actions_min(), game.n_actions_max());
    let (ly, lz) = (min.log_row(s), max.log_row(s));
    let mut w = q_s.to_vec();
    if regularized {
        for a in 0..na {
            for b in 0..nb {
                w[a * nb + b] += -game.tau_max() * lz[b] + game.tau_min() * ly[a];
            }
        }
    }
    w
}

/// Closed-form infinite-horizon gradients of `J = rho . V^{phi, psi}`.
pub fn game_gradients(game: &MarkovGame, rewards: &[f64], min: &TabularPolicy, max: &TabularPolicy) -> Result<GameGradients> {
    check_policies(game, min, max)?;
    check_table(game, rewards)?;
    let values = policy_eval_table(game, rewards, min, max)?;
    let d = visitation(game, min, max)?;
    let q = q_table(game, rewards, &values);
    let (na, nb) = (game.n_actions_min(), game.n_actions_max());
    let block = na * nb;
    let scale = 1.0 / (1.0 - game.discount());
    let mut reward = vec![0.0; game.n_joint()];
    let mut grad_min = vec![0.0; game.n_states() * na];
    let mut grad_max = vec![0.0; game.n_states() * nb];
    for s in (0..game.n_states()).filter(|&s| !game.is_absorbing(s)) {
        let weight = d[s] * scale;
        let (y, z) = (min.row(s), max.row(s));
        for a in 0..na {
            for b in 0..nb {
                reward[s * block + a * nb + b] = weight * y[a] * z[b];
            }
        }
        let w = weight_table(game, min, max, s, &q[s * block..(s + 1) * block], true);
        accumulate_policy_terms(
            weight,
            y,
            z,
            &w,
            &mut grad_min[s * na..(s + 1) * na],
            &mut grad_max[s * nb..(s + 1) * nb],
        );
    }
    Ok(GameGradients {
        value: values.expectation(game.init_dist()),
        values,
        reward,
        min: grad_min,
        max: grad_max,
    })
}

/// Exact gradient of `J(x, phi, psi)` with respect to one parameter block.
pub fn exact_grad(
    game: &MarkovGame,
    model: &RewardModel,
    min: &TabularPolicy,
    max: &TabularPolicy,
    wrt: GradTarget,
) -> Result<Vec<f64>> {
    Ok(game_gradients(game, &game.reward_table(model), min, max)?.get(model, wrt))
}

/// Finite-horizon objective `E[sum_{t<H} discount^t c_t]` over trajectories of the
/// game's dynamics, where `c_t` is the table entry at `(s_t, a_t, b_t)` plus, if
/// `regularized`, the entropy terms `-tau_max log z + tau_min log y`.
/// Absorbing states contribute nothing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HorizonSpec {
    pub horizon: usize,
    pub discount: f64,
    pub regularized: bool,
}

/// Exact value and gradients of a finite-horizon objective (backward recursion
/// for the cost-to-go, forward recursion for the state marginals).
pub fn horizon_gradients(
    game: &MarkovGame,
    costs: &[f64],
    min: &TabularPolicy,
    max: &TabularPolicy,
    spec: HorizonSpec,
) -> Result<GameGradients> {
    check_policies(game, min, max)?;
    check_table(game, costs)?;
    if spec.horizon == 0 || !(0.0..=1.0).contains(&spec.discount) {
        return Err(Error::InvalidConfig(format!(
            "horizon {} and discount {} must satisfy H >= 1, 0 <= discount <= 1",
            spec.horizon, spec.discount
        )));
    }
    let n = game.n_states();
    let (na, nb) = (game.n_actions_min(), game.n_actions_max());
    let block = na * nb;
    let h = spec.horizon;

    // w_tables[n - 1] holds W_n = cost + discount E[V_{n-1}] (+ entropy terms); V_0 = 0.
    let mut w_tables: Vec<Vec<f64>> = Vec::with_capacity(h);
    let mut v = vec![0.0; n];
    for _ in 0..h {
        let mut w_all = vec![0.0; game.n_joint()];
        let mut v_next = vec![0.0; n];
        for s in (0..n).filter(|&s| !game.is_absorbing(s)) {
            let mut q_s = vec![0.0; block];
            for a in 0..na {
                for b in 0..nb {
                    q_s[a * nb + b] = costs[game.joint_index(s, a, b)] + spec.discount * game.expected_next(s, a, b, &v);
                }
            }
            let w = weight_table(game, min, max, s, &q_s, spec.regularized);
            let (y, z) = (min.row(s), max.row(s));
            let mut acc = 0.0;
            for a in 0..na {
                for b in 0..nb {
                    acc += y[a] * z[b] * w[a * nb + b];
                }
            }
            v_next[s] = acc;
            w_all[s * block..(s + 1) * block].copy_from_slice(&w);
        }
        w_tables.push(w_all);
        v = v_next;
    }

    let mut reward = vec![0.0; game.n_joint()];
    let mut grad_min = vec![0.0; n * na];
    let mut grad_max = vec![0.0; n * nb];
    let mut mu = game.init_dist().to_vec();
    let mut disc = 1.0;
    for t in 0..h {
        let w_all = &w_tables[h - t - 1];
        let mut mu_next = vec![0.0; n];
        for s in (0..n).filter(|&s| !game.is_absorbing(s) && mu[s] != 0.0) {
            let weight = disc * mu[s];
            let (y, z) = (min.row(s), max.row(s));
            for a in 0..na {
                for b in 0..nb {
                    let p = y[a] * z[b];
                    reward[s * block + a * nb + b] += weight * p;
                    let (next, prob) = game.successors(s, a, b);
                    for (&sp, &pr) in next.iter().zip(prob) {
                        mu_next[sp] += mu[s] * p * pr;
                    }
                }
            }
            accumulate_policy_terms(
                weight,
                y,
                z,
                &w_all[s * block..(s + 1) * block],
                &mut grad_min[s * na..(s + 1) * na],
                &mut grad_max[s * nb..(s + 1) * nb],
            );
        }
        mu = mu_next;
        disc *= spec.discount;
    }

    let values = ValueVector(v);
    Ok(GameGradients {
        value: values.expectation(game.init_dist()),
        values,
        reward,
        min: grad_min,
        max: grad_max,
    })
}

/// Exact gradient of the `H`-step truncated regularized value `J_H(x, phi, psi)`,
/// the quantity the trajectory estimators are unbiased for.
pub fn truncated_grad(
    game: &MarkovGame,
    model: &RewardModel,
    min: &TabularPolicy,
    max: &TabularPolicy,
    horizon: usize,
) -> Result<GameGradients> {
    horizon_gradients(
        game,
        &game.reward_table(model),
        min,
        max,
        HorizonSpec {
            horizon,
            discount: game.discount(),
            regularized: true,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::{policy_eval, solve_ne};
    use crate::game::test_games::random_game;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_policy(rng: &mut ChaCha8Rng, ns: usize, na: usize) -> TabularPolicy {
        TabularPolicy::from_logits(ns, na, (0..ns * na).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect()).unwrap()
    }

    fn j(g: &MarkovGame, m: &RewardModel, y: &TabularPolicy, z: &TabularPolicy) -> f64 {
        policy_eval(g, m, y, z).unwrap().expectation(g.init_dist())
    }

    fn assert_close(analytic: f64, fd: f64) {
        assert!((analytic - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "analytic {analytic} vs fd {fd}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let g = random_game(3, 3, 2, 3, 0.9, 0.1);
        let mut m = RewardModel::for_game(&g, 1.0).unwrap();
        m.set_incentive((0..g.n_joint()).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap();
        let y = random_policy(&mut rng, 3, 2);
        let z = random_policy(&mut rng, 3, 3);
        let grads = game_gradients(&g, &g.reward_table(&m), &y, &z).unwrap();
        let h = 1e-6;

        let gx = grads.incentive(&m);
        for i in 0..g.n_joint() {
            let mut up = m.clone();
            let mut dn = m.clone();
            let mut e = vec![0.0; g.n_joint()];
            e[i] = 1.0;
            up.step(&e, h);
            dn.step(&e, -h);
            assert_close(gx[i], (j(&g, &up, &y, &z) - j(&g, &dn, &y, &z)) / (2.0 * h));
        }
        for i in 0..y.logits().len() {
            let mut e = vec![0.0; y.logits().len()];
            e[i] = 1.0;
            let (mut up, mut dn) = (y.clone(), y.clone());
            up.step(&e, h).unwrap();
            dn.step(&e, -h).unwrap();
            assert_close(grads.min[i], (j(&g, &m, &up, &z) - j(&g, &m, &dn, &z)) / (2.0 * h));
        }
        for i in 0..z.logits().len() {
            let mut e = vec![0.0; z.logits().len()];
            e[i] = 1.0;
            let (mut up, mut dn) = (z.clone(), z.clone());
            up.step(&e, h).unwrap();
            dn.step(&e, -h).unwrap();
            assert_close(grads.max[i], (j(&g, &m, &y, &up) - j(&g, &m, &y, &dn)) / (2.0 * h));
        }
    }

    #[test]
    fn constant_reward_has_zero_incentive_gradient() {
        let g = random_game(5, 3, 2, 2, 0.9, 0.1);
        let m = RewardModel::for_game(&g, 0.0).unwrap();
        let u = TabularPolicy::uniform(3, 2);
        assert!(exact_grad(&g, &m, &u, &u, GradTarget::Incentive).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn policy_gradients_vanish_at_equilibrium() {
        let g = random_game(8, 3, 2, 2, 0.9, 0.1);
        let m = RewardModel::for_game(&g, 1.0).unwrap();
        let ne = solve_ne(&g, &m).unwrap();
        for wrt in [GradTarget::Min, GradTarget::Max] {
            let grad = exact_grad(&g, &m, &ne.policy_min, &ne.policy_max, wrt).unwrap();
            let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 1e-6, "{wrt:?}: {norm}");
        }
    }

    #[test]
    fn truncated_gradients_converge_to_full_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let g = random_game(12, 3, 2, 2, 0.8, 0.2);
        let m = RewardModel::for_game(&g, 1.0).unwrap();
        let (y, z) = (random_policy(&mut rng, 3, 2), random_policy(&mut rng, 3, 2));
        let full = game_gradients(&g, &g.reward_table(&m), &y, &z).unwrap();
        let trunc = truncated_grad(&g, &m, &y, &z, 200).unwrap();
        assert!((full.value - trunc.value).abs() < 1e-12);
        for (a, b) in full.min.iter().zip(&trunc.min).chain(full.max.iter().zip(&trunc.max)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in full.reward.iter().zip(&trunc.reward) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn horizon_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = random_game(2, 3, 2, 3, 0.9, 0.1);
        let costs: Vec<f64> = (0..g.n_joint()).map(|_| rng.gen()).collect();
        let (y, z) = (random_policy(&mut rng, 3, 2), random_policy(&mut rng, 3, 3));
        let spec = HorizonSpec { horizon: 4, discount: 1.0, regularized: false };
        let grads = horizon_gradients(&g, &costs, &y, &z, spec).unwrap();
        let h = 1e-6;
        for i in 0..y.logits().len() {
            let mut e = vec![0.0; y.logits().len()];
            e[i] = 1.0;
            let (mut up, mut dn) = (y.clone(), y.clone());
            up.step(&e, h).unwrap();
            dn.step(&e, -h).unwrap();
            let fd = (horizon_gradients(&g, &costs, &up, &z, spec).unwrap().value
                - horizon_gradients(&g, &costs, &dn, &z, spec).unwrap().value)
                / (2.0 * h);
            assert_close(grads.min[i], fd);
        }
        for i in 0..g.n_joint() {
            let mut c = costs.clone();
            c[i] += h;
            let fd = (horizon_gradients(&g, &c, &y, &z, spec).unwrap().value - grads.value) / h;
            assert!((fd - grads.reward[i]).abs() < 1e-7);
        }
    }
}
