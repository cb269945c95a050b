use super::{check_table, soft_bellman_step, sup_distance, StateSaddle, ValueVector};
use crate::error::{Error, Result};
use crate::game::{MarkovGame, RewardModel, TabularPolicy};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NeOptions {
    /// Target accuracy of the fixed point; iteration stops once the Bellman
    /// residual is below `tol (1 - gamma) / gamma`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for NeOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iters: 200_000 }
    }
}

/// Regularized Nash equilibrium of the game.
#[derive(Clone, Debug)]
pub struct NashSolution {
    pub policy_min: TabularPolicy,
    pub policy_max: TabularPolicy,
    pub v_star: ValueVector,
    /// `rho . v_star`.
    pub j_star: f64,
    /// Final `||T v - v||_inf`.
    pub residual: f64,
    pub iterations: usize,
    pub saddles: Vec<StateSaddle>,
}

pub fn solve_ne(game: &MarkovGame, model: &RewardModel) -> Result<NashSolution> {
    solve_ne_with(game, model, NeOptions::default())
}

pub fn solve_ne_with(game: &MarkovGame, model: &RewardModel, opts: NeOptions) -> Result<NashSolution> {
    solve_ne_table(game, &game.reward_table(model), opts)
}

/// Value iteration with `T_{*,h}` from `v = 0`, warm-starting each per-state saddle.
pub fn solve_ne_table(game: &MarkovGame, rewards: &[f64], opts: NeOptions) -> Result<NashSolution> {
    check_table(game, rewards)?;
    let gamma = game.discount();
    let stop = opts.tol * (1.0 - gamma) / gamma;
    let mut v = vec![0.0; game.n_states()];
    let mut saddles: Option<Vec<StateSaddle>> = None;
    let mut residual = f64::INFINITY;
    for it in 1..=opts.max_iters {
        let (next, sad) = soft_bellman_step(game, rewards, &v, saddles.as_deref())?;
        residual = sup_distance(&next, &v);
        v = next;
        saddles = Some(sad);
        if residual <= stop {
            // Extract policies from the saddles of T v at the returned v.
            let (_, sad) = soft_bellman_step(game, rewards, &v, saddles.as_deref())?;
            return finish(game, v, sad, residual, it);
        }
    }
    Err(Error::NoConvergence {
        what: "Nash value iteration",
        iterations: opts.max_iters,
        residual,
    })
}

fn finish(game: &MarkovGame, v: Vec<f64>, saddles: Vec<StateSaddle>, residual: f64, iterations: usize) -> Result<NashSolution> {
    let log_y: Vec<f64> = saddles.iter().flat_map(|s| s.log_y().iter().copied()).collect();
    let log_z: Vec<f64> = saddles.iter().flat_map(|s| s.log_z().iter().copied()).collect();
    let policy_min = TabularPolicy::from_logits(game.n_states(), game.n_actions_min(), log_y)?;
    let policy_max = TabularPolicy::from_logits(game.n_states(), game.n_actions_max(), log_z)?;
    let v_star = ValueVector(v);
    let j_star = v_star.expectation(game.init_dist());
    Ok(NashSolution {
        policy_min,
        policy_max,
        v_star,
        j_star,
        residual,
        iterations,
        saddles,
    })
}
