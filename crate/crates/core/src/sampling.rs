//! Seeded trajectory sampling and truncated-horizon REINFORCE estimators.
//!
//! Every trajectory draws from its own ChaCha stream keyed by
//! `(seed, outer, inner, tag)` and the trajectory index, so a batch is
//! reproducible no matter how its trajectories are scheduled.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::exact::HorizonSpec;
use crate::game::{MarkovGame, Player, RewardModel, TabularPolicy};

/// Batches with at least this many trajectory-steps are sampled in parallel.
const PAR_WORK: usize = 8192;

/// One recorded transition `(s_t, a_t, b_t, r_t)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub state: usize,
    pub action_min: usize,
    pub action_max: usize,
    pub reward: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// Per-trajectory random stream.
pub type RngStream = ChaCha8Rng;

/// Identifies one estimator call; trajectory `i` of the call uses stream `i`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub outer: u64,
    pub inner: u64,
    /// Distinguishes the estimator calls made at the same iteration.
    pub tag: u64,
}

impl StreamKey {
    pub fn new(seed: u64, outer: u64, inner: u64, tag: u64) -> Self {
        Self { seed, outer, inner, tag }
    }

    pub fn stream(&self, index: u64) -> RngStream {
        let mut bytes = [0u8; 32];
        for (chunk, word) in bytes.chunks_mut(8).zip([self.seed, self.outer, self.inner, self.tag]) {
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(bytes);
        rng.set_stream(index);
        rng
    }
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off left u above the total mass; fall back to the last positive entry.
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

fn sample_sparse<R: Rng + ?Sized>(rng: &mut R, next: &[usize], prob: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (&sp, &p) in next.iter().zip(prob) {
        acc += p;
        if u < acc {
            return sp;
        }
    }
    *next.last().expect("transition rows are nonempty")
}

/// Rolls out one episode of at most `horizon` steps under `(min, max)`.
///
/// `rewards` is the joint table recorded in each step. The episode ends after
/// step `H - 1`, or as soon as it reaches an absorbing state; an episode that
/// starts absorbing records that single zero-reward step.
pub fn rollout<R: Rng + ?Sized>(
    game: &MarkovGame,
    rewards: &[f64],
    min: &TabularPolicy,
    max: &TabularPolicy,
    horizon: usize,
    rng: &mut R,
) -> Trajectory {
    let mut steps = Vec::with_capacity(horizon);
    let mut s = sample_index(rng, game.init_dist());
    for _ in 0..horizon {
        let a = sample_index(rng, min.row(s));
        let b = sample_index(rng, max.row(s));
        if game.is_absorbing(s) {
            steps.push(Step { state: s, action_min: a, action_max: b, reward: 0.0 });
            break;
        }
        steps.push(Step {
            state: s,
            action_min: a,
            action_max: b,
            reward: rewards[game.joint_index(s, a, b)],
        });
        let (next, prob) = game.successors(s, a, b);
        s = sample_sparse(rng, next, prob);
        if game.is_absorbing(s) {
            break;
        }
    }
    Trajectory { steps }
}

/// A batch of trajectories indexed by their stream.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub trajectories: Vec<Trajectory>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Environment transitions consumed, `sum_i len(tau_i)`.
    pub fn env_steps(&self) -> u64 {
        self.trajectories.iter().map(|t| t.len() as u64).sum()
    }
}

/// Samples `size` trajectories, trajectory `i` from `key.stream(i)`.
pub fn sample_batch(
    game: &MarkovGame,
    rewards: &[f64],
    min: &TabularPolicy,
    max: &TabularPolicy,
    horizon: usize,
    size: usize,
    key: StreamKey,
) -> Batch {
    let one = |i: usize| rollout(game, rewards, min, max, horizon, &mut key.stream(i as u64));
    let trajectories = if size * horizon >= PAR_WORK {
        (0..size).into_par_iter().map(one).collect()
    } else {
        (0..size).map(one).collect()
    };
    Batch { trajectories }
}

/// Lower-level estimators of one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GradEstimate {
    pub grad_x: Vec<f64>,
    pub grad_min_logits: Vec<f64>,
    pub grad_max_logits: Vec<f64>,
    pub n_env_steps: u64,
}

/// Objective conventions of the lower-level game: regularized, game discount.
pub fn game_spec(game: &MarkovGame, horizon: usize) -> HorizonSpec {
    HorizonSpec { horizon, discount: game.discount(), regularized: true }
}

fn step_cost(game: &MarkovGame, min: &TabularPolicy, max: &TabularPolicy, step: &Step, regularized: bool) -> f64 {
    if regularized && !game.is_absorbing(step.state) {
        step.reward - game.tau_max() * max.log_row(step.state)[step.action_max]
            + game.tau_min() * min.log_row(step.state)[step.action_min]
    } else {
        step.reward
    }
}

/// `G_t = sum_{k >= t} discount^{k-t} c_k` for every step, in one backward pass.
fn returns_to_go(game: &MarkovGame, min: &TabularPolicy, max: &TabularPolicy, traj: &Trajectory, spec: HorizonSpec) -> Vec<f64> {
    let mut out = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for (t, step) in traj.steps.iter().enumerate().rev() {
        acc = step_cost(game, min, max, step, spec.regularized) + spec.discount * acc;
        out[t] = acc;
    }
    out
}

/// Discounted (optionally regularized) reward-to-go from step `t`.
pub fn reward_to_go(
    game: &MarkovGame,
    min: &TabularPolicy,
    max: &TabularPolicy,
    traj: &Trajectory,
    t: usize,
    spec: HorizonSpec,
) -> Result<f64> {
    if t >= traj.len() {
        return Err(Error::StepOutOfRange { index: t, len: traj.len() });
    }
    let mut acc = 0.0;
    for step in traj.steps[t..].iter().rev() {
        acc = step_cost(game, min, max, step, spec.regularized) + spec.discount * acc;
    }
    Ok(acc)
}

/// The policy-gradient weight `Q_hat(s_t, a_t, b_t) - tau_max log z(b_t) + tau_min log y(a_t)`,
/// i.e. the regularized reward-to-go of the lower-level game.
pub fn q_hat(game: &MarkovGame, min: &TabularPolicy, max: &TabularPolicy, traj: &Trajectory, t: usize) -> Result<f64> {
    reward_to_go(game, min, max, traj, t, game_spec(game, traj.len()))
}

/// Adds `scale * sum_t discount^t G_t grad log pi(. | s_t)` for one trajectory.
pub fn accumulate_policy_grad(
    game: &MarkovGame,
    min: &TabularPolicy,
    max: &TabularPolicy,
    traj: &Trajectory,
    spec: HorizonSpec,
    side: Player,
    scale: f64,
    out: &mut [f64],
) {
    let g = returns_to_go(game, min, max, traj, spec);
    let policy = match side {
        Player::Min => min,
        Player::Max => max,
    };
    let n = policy.n_actions();
    let mut disc = scale;
    for (t, step) in traj.steps.iter().enumerate() {
        if !game.is_absorbing(step.state) && g[t] != 0.0 {
            let action = match side {
                Player::Min => step.action_min,
                Player::Max => step.action_max,
            };
            let row = &mut out[step.state * n..(step.state + 1) * n];
            let w = disc * g[t];
            for (k, (o, p)) in row.iter_mut().zip(policy.row(step.state)).enumerate() {
                *o += w * (if k == action { 1.0 } else { 0.0 } - p);
            }
        }
        disc *= spec.discount;
    }
}

/// Adds `scale * sum_t discount^t grad_x r_x(s_t, a_t, b_t)` for one trajectory.
pub fn accumulate_grad_x(game: &MarkovGame, model: &RewardModel, traj: &Trajectory, discount: f64, scale: f64, out: &mut [f64]) {
    let mut disc = scale;
    for step in &traj.steps {
        if !game.is_absorbing(step.state) {
            let i = game.joint_index(step.state, step.action_min, step.action_max);
            out[i] += disc * model.slope(i);
        }
        disc *= discount;
    }
}

/// `(1/B) sum_i sum_t gamma^t grad_x r_x(s_t, a_t, b_t)`.
pub fn estimate_grad_x(game: &MarkovGame, model: &RewardModel, batch: &Batch) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = vec![0.0; game.n_joint()];
    let scale = 1.0 / batch.len() as f64;
    for traj in &batch.trajectories {
        accumulate_grad_x(game, model, traj, game.discount(), scale, &mut out);
    }
    Ok(out)
}

/// REINFORCE estimator of the lower-level policy gradient for one side.
pub fn estimate_grad_policy(
    game: &MarkovGame,
    min: &TabularPolicy,
    max: &TabularPolicy,
    batch: &Batch,
    side: Player,
) -> Result<Vec<f64>> {
    let horizon = batch.trajectories.iter().map(Trajectory::len).max().unwrap_or(0);
    estimate_policy_grad_with(game, min, max, batch, game_spec(game, horizon), side)
}

/// REINFORCE estimator for an arbitrary per-step cost recorded in the batch.
pub fn estimate_policy_grad_with(
    game: &MarkovGame,
    min: &TabularPolicy,
    max: &TabularPolicy,
    batch: &Batch,
    spec: HorizonSpec,
    side: Player,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = game.n_states() * game.n_actions(side);
    let mut out = vec![0.0; n];
    let scale = 1.0 / batch.len() as f64;
    for traj in &batch.trajectories {
        accumulate_policy_grad(game, min, max, traj, spec, side, scale, &mut out);
    }
    Ok(out)
}

/// Mean discounted return of a batch under `spec`.
pub fn estimate_value(game: &MarkovGame, min: &TabularPolicy, max: &TabularPolicy, batch: &Batch, spec: HorizonSpec) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let total: f64 = batch
        .trajectories
        .iter()
        .filter(|t| !t.is_empty())
        .map(|t| returns_to_go(game, min, max, t, spec)[0])
        .sum();
    Ok(total / batch.len() as f64)
}

/// All three lower-level estimators from one batch.
pub fn estimate_all(
    game: &MarkovGame,
    model: &RewardModel,
    min: &TabularPolicy,
    max: &TabularPolicy,
    batch: &Batch,
) -> Result<GradEstimate> {
    let grad = GradEstimate {
        grad_x: estimate_grad_x(game, model, batch)?,
        grad_min_logits: estimate_grad_policy(game, min, max, batch, Player::Min)?,
        grad_max_logits: estimate_grad_policy(game, min, max, batch, Player::Max)?,
        n_env_steps: batch.env_steps(),
    };
    let finite = grad.grad_x.iter().chain(&grad.grad_min_logits).chain(&grad.grad_max_logits).all(|v| v.is_finite());
    if !finite {
        return Err(Error::NonFinite("gradient estimate".into()));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exact::truncated_grad;
    use crate::game::test_games::random_game;
    use crate::game::GameParts;

    fn deterministic_game(reward: f64, discount: f64) -> MarkovGame {
        MarkovGame::new(GameParts {
            n_states: 1,
            n_actions_min: 2,
            n_actions_max: 2,
            discount,
            tau_min: 0.1,
            tau_max: 0.1,
            init_dist: vec![1.0],
            base_reward: vec![reward; 4],
            absorbing: vec![false],
            transitions: vec![vec![(0, 1.0)]; 4],
        })
        .unwrap()
    }

    #[test]
    fn deterministic_one_state_rollout() {
        let g = deterministic_game(0.0, 0.9);
        let u = TabularPolicy::uniform(1, 2);
        let t = rollout(&g, &[0.0; 4], &u, &u, 3, &mut StreamKey::new(1, 0, 0, 0).stream(0));
        assert_eq!(t.len(), 3);
        assert!(t.steps.iter().all(|s| s.state == 0));
    }

    #[test]
    fn absorbing_start_has_length_one() {
        let g = MarkovGame::new(GameParts {
            n_states: 2,
            n_actions_min: 1,
            n_actions_max: 1,
            discount: 0.9,
            tau_min: 0.1,
            tau_max: 0.1,
            init_dist: vec![0.0, 1.0],
            base_reward: vec![1.0, 1.0],
            absorbing: vec![false, true],
            transitions: vec![vec![(1, 1.0)], vec![(1, 1.0)]],
        })
        .unwrap();
        let u = TabularPolicy::uniform(2, 1);
        let t = rollout(&g, &[1.0, 1.0], &u, &u, 5, &mut StreamKey::new(0, 0, 0, 0).stream(0));
        assert_eq!(t.len(), 1);
        assert_eq!(t.steps[0].reward, 0.0);
    }

    #[test]
    fn seeded_rollouts_are_reproducible() {
        let g = random_game(3, 4, 2, 3, 0.9, 0.1);
        let r = g.base_reward().to_vec();
        let (y, z) = (TabularPolicy::uniform(4, 2), TabularPolicy::uniform(4, 3));
        let key = StreamKey::new(11, 2, 3, 4);
        let a = sample_batch(&g, &r, &y, &z, 10, 3000, key);
        let b = sample_batch(&g, &r, &y, &z, 10, 3000, key);
        assert_eq!(a, b);
        let seq: Vec<Trajectory> = (0..3000).map(|i| rollout(&g, &r, &y, &z, 10, &mut key.stream(i))).collect();
        assert_eq!(a.trajectories, seq);
        let other = sample_batch(&g, &r, &y, &z, 10, 3000, StreamKey::new(11, 2, 3, 5));
        assert_ne!(a, other);
    }

    #[test]
    fn reward_to_go_arithmetic() {
        let g = deterministic_game(0.0, 0.5);
        let u = TabularPolicy::uniform(1, 2);
        let traj = Trajectory {
            steps: vec![
                Step { state: 0, action_min: 0, action_max: 0, reward: 1.0 },
                Step { state: 0, action_min: 1, action_max: 0, reward: 2.0 },
            ],
        };
        let spec = HorizonSpec { horizon: 2, discount: 0.5, regularized: false };
        assert_eq!(reward_to_go(&g, &u, &u, &traj, 0, spec).unwrap(), 2.0);
        assert_eq!(reward_to_go(&g, &u, &u, &traj, 1, spec).unwrap(), 2.0);
        assert!(reward_to_go(&g, &u, &u, &traj, 2, spec).is_err());
        // Uniform symmetric policies: the entropy terms cancel exactly.
        let zero = Trajectory { steps: traj.steps.iter().map(|s| Step { reward: 0.0, ..*s }).collect() };
        assert_eq!(q_hat(&g, &u, &u, &zero, 0).unwrap(), 0.0);
    }

    #[test]
    fn empty_batches_are_errors() {
        let g = deterministic_game(0.0, 0.5);
        let u = TabularPolicy::uniform(1, 2);
        let m = RewardModel::for_game(&g, 1.0).unwrap();
        let empty = Batch { trajectories: vec![] };
        assert!(matches!(estimate_grad_x(&g, &m, &empty), Err(Error::EmptyBatch)));
        assert!(matches!(estimate_grad_policy(&g, &u, &u, &empty, Player::Min), Err(Error::EmptyBatch)));
    }

    #[test]
    fn single_step_incentive_gradient() {
        let g = deterministic_game(0.0, 0.9);
        let m = RewardModel::for_game(&g, 1.0).unwrap();
        let y = TabularPolicy::from_logits(1, 2, vec![50.0, -50.0]).unwrap();
        let batch = sample_batch(&g, &g.reward_table(&m), &y, &y, 1, 1, StreamKey::new(0, 0, 0, 0));
        let gx = estimate_grad_x(&g, &m, &batch).unwrap();
        assert_eq!(gx[0], 0.25);
        assert!(gx[1..].iter().all(|v| *v == 0.0));
        let m0 = RewardModel::for_game(&g, 0.0).unwrap();
        assert!(estimate_grad_x(&g, &m0, &batch).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn estimates_are_unbiased_for_truncated_gradients() {
        let g = random_game(5, 3, 2, 2, 0.9, 0.1);
        let m = RewardModel::for_game(&g, 1.0).unwrap();
        let y = TabularPolicy::from_logits(3, 2, vec![0.5, -0.3, 0.1, 0.9, -1.0, 0.2]).unwrap();
        let z = TabularPolicy::from_logits(3, 2, vec![-0.2, 0.4, 0.8, 0.0, 0.3, -0.6]).unwrap();
        let h = 6;
        let exact = truncated_grad(&g, &m, &y, &z, h).unwrap();
        let n = 100_000;
        let batch = sample_batch(&g, &g.reward_table(&m), &y, &z, h, n, StreamKey::new(9, 0, 0, 0));
        let spec = game_spec(&g, h);
        for (side, exact_side) in [(Player::Min, &exact.min), (Player::Max, &exact.max)] {
            let dim = exact_side.len();
            let mut sum = vec![0.0; dim];
            let mut sq = vec![0.0; dim];
            for traj in &batch.trajectories {
                let mut one = vec![0.0; dim];
                accumulate_policy_grad(&g, &y, &z, traj, spec, side, 1.0, &mut one);
                for i in 0..dim {
                    sum[i] += one[i];
                    sq[i] += one[i] * one[i];
                }
            }
            for i in 0..dim {
                let mean = sum[i] / n as f64;
                let se = ((sq[i] / n as f64 - mean * mean) / n as f64).sqrt();
                assert!((mean - exact_side[i]).abs() <= 4.0 * se, "{side:?}[{i}]: {mean} vs {}", exact_side[i]);
            }
        }
    }
}
