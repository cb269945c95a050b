//! Tabular two-player zero-sum Markov game with entropy regularization.
//!
//! The min player (policy `phi`) chooses from `n_actions_min` actions, the max
//! player (policy `psi`) from `n_actions_max`. Joint indices are laid out
//! row-major as `(s, a, b)`.

mod document;
mod policy;
mod reward;

pub use document::GameDocument;
pub use policy::TabularPolicy;
pub use reward::{sigmoid, RewardModel, SparseEntry};

use crate::error::{Error, Result};

/// Tolerance on row sums for transition kernels and the initial distribution.
pub const ROW_SUM_TOL: f64 = 1e-9;

/// Which side of the zero-sum game a quantity belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Player {
    /// Minimizes the regularized value (policy `phi`).
    Min,
    /// Maximizes the regularized value (policy `psi`).
    Max,
}

impl Player {
    pub fn opponent(self) -> Player {
        match self {
            Player::Min => Player::Max,
            Player::Max => Player::Min,
        }
    }
}

/// Raw ingredients of a [`MarkovGame`]; validated by [`MarkovGame::new`].
///
/// `transitions` holds one sparse row per joint index `(s, a, b)`.
#[derive(Clone, Debug)]
pub struct GameParts {
    pub n_states: usize,
    pub n_actions_min: usize,
    pub n_actions_max: usize,
    pub discount: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub init_dist: Vec<f64>,
    pub base_reward: Vec<f64>,
    pub absorbing: Vec<bool>,
    pub transitions: Vec<Vec<(usize, f64)>>,
}

/// Sparse transition kernel stored in compressed rows, one row per `(s, a, b)`.
#[derive(Clone, Debug, PartialEq)]
struct Kernel {
    offsets: Vec<usize>,
    next: Vec<usize>,
    prob: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarkovGame {
    n_states: usize,
    n_actions_min: usize,
    n_actions_max: usize,
    kernel: Kernel,
    discount: f64,
    tau_min: f64,
    tau_max: f64,
    init_dist: Vec<f64>,
    base_reward: Vec<f64>,
    absorbing: Vec<bool>,
}

impl MarkovGame {
    pub fn new(parts: GameParts) -> Result<Self> {
        let GameParts {
            n_states,
            n_actions_min,
            n_actions_max,
            discount,
            tau_min,
            tau_max,
            init_dist,
            base_reward,
            absorbing,
            transitions,
        } = parts;

        let invalid = |msg: String| Err(Error::InvalidGame(msg));
        if n_states == 0 || n_actions_min == 0 || n_actions_max == 0 {
            return invalid("state and action counts must be positive".into());
        }
        if !(discount > 0.0 && discount < 1.0) {
            return invalid(format!("discount {discount} outside (0, 1)"));
        }
        if !(tau_min > 0.0 && tau_min.is_finite() && tau_max > 0.0 && tau_max.is_finite()) {
            return invalid(format!("regularization coefficients must be positive, got {tau_min}, {tau_max}"));
        }
        let n_joint = n_states * n_actions_min * n_actions_max;
        if init_dist.len() != n_states || absorbing.len() != n_states {
            return invalid("init_dist and absorbing must have one entry per state".into());
        }
        if base_reward.len() != n_joint || transitions.len() != n_joint {
            return invalid(format!(
                "expected {n_joint} reward entries and transition rows, got {} and {}",
                base_reward.len(),
                transitions.len()
            ));
        }
        if init_dist.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return invalid("init_dist has a negative or non-finite entry".into());
        }
        let init_sum: f64 = init_dist.iter().sum();
        if (init_sum - 1.0).abs() > ROW_SUM_TOL {
            return invalid(format!("init_dist sums to {init_sum}"));
        }
        if let Some(r) = base_reward.iter().find(|r| !r.is_finite()) {
            return invalid(format!("non-finite base reward {r}"));
        }

        let mut offsets = Vec::with_capacity(n_joint + 1);
        let mut next = Vec::new();
        let mut prob = Vec::new();
        offsets.push(0);
        for (idx, row) in transitions.iter().enumerate() {
            let s = idx / (n_actions_min * n_actions_max);
            let mut sum = 0.0;
            for &(sp, p) in row {
                if sp >= n_states {
                    return invalid(format!("transition row {idx} points to state {sp}"));
                }
                if !(p.is_finite() && p >= 0.0) {
                    return invalid(format!("transition row {idx} has probability {p}"));
                }
                sum += p;
                if p > 0.0 {
                    next.push(sp);
                    prob.push(p);
                }
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return invalid(format!("transition row {idx} sums to {sum}"));
            }
            if absorbing[s] {
                let stay: f64 = row.iter().filter(|(sp, _)| *sp == s).map(|(_, p)| p).sum();
                if (stay - 1.0).abs() > ROW_SUM_TOL {
                    return invalid(format!("absorbing state {s} does not self-loop"));
                }
            }
            offsets.push(next.len());
        }

        Ok(Self {
            n_states,
            n_actions_min,
            n_actions_max,
            kernel: Kernel { offsets, next, prob },
            discount,
            tau_min,
            tau_max,
            init_dist,
            base_reward,
            absorbing,
        })
    }

    /// Builds a game from a dense `(s, a, b, s')` transition tensor.
    #[allow(clippy::too_many_arguments)]
    pub fn from_dense(
        n_states: usize,
        n_actions_min: usize,
        n_actions_max: usize,
        discount: f64,
        tau_min: f64,
        tau_max: f64,
        init_dist: Vec<f64>,
        base_reward: Vec<f64>,
        absorbing: Vec<bool>,
        dense_transition: &[f64],
    ) -> Result<Self> {
        let n_joint = n_states * n_actions_min * n_actions_max;
        if dense_transition.len() != n_joint * n_states {
            return Err(Error::InvalidGame(format!(
                "dense transition tensor has {} entries, expected {}",
                dense_transition.len(),
                n_joint * n_states
            )));
        }
        let transitions = dense_transition
            .chunks(n_states)
            .map(|row| row.iter().copied().enumerate().filter(|(_, p)| *p != 0.0).collect())
            .collect();
        Self::new(GameParts {
            n_states,
            n_actions_min,
            n_actions_max,
            discount,
            tau_min,
            tau_max,
            init_dist,
            base_reward,
            absorbing,
            transitions,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions_min(&self) -> usize {
        self.n_actions_min
    }

    pub fn n_actions_max(&self) -> usize {
        self.n_actions_max
    }

    pub fn n_actions(&self, player: Player) -> usize {
        match player {
            Player::Min => self.n_actions_min,
            Player::Max => self.n_actions_max,
        }
    }

    /// Number of joint `(s, a, b)` entries.
    pub fn n_joint(&self) -> usize {
        self.n_states * self.n_actions_min * self.n_actions_max
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn tau_min(&self) -> f64 {
        self.tau_min
    }

    pub fn tau_max(&self) -> f64 {
        self.tau_max
    }

    pub fn tau(&self, player: Player) -> f64 {
        match player {
            Player::Min => self.tau_min,
            Player::Max => self.tau_max,
        }
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.init_dist
    }

    pub fn base_reward(&self) -> &[f64] {
        &self.base_reward
    }

    pub fn absorbing(&self) -> &[bool] {
        &self.absorbing
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing[s]
    }

    #[inline]
    pub fn joint_index(&self, s: usize, a: usize, b: usize) -> usize {
        (s * self.n_actions_min + a) * self.n_actions_max + b
    }

    pub fn check_indices(&self, s: usize, a: usize, b: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::StateOutOfRange { index: s, n_states: self.n_states });
        }
        if a >= self.n_actions_min {
            return Err(Error::ActionOutOfRange { index: a, n_actions: self.n_actions_min });
        }
        if b >= self.n_actions_max {
            return Err(Error::ActionOutOfRange { index: b, n_actions: self.n_actions_max });
        }
        Ok(())
    }

    /// Sparse successor distribution of `(s, a, b)` as parallel slices.
    #[inline]
    pub fn successors(&self, s: usize, a: usize, b: usize) -> (&[usize], &[f64]) {
        let idx = self.joint_index(s, a, b);
        let (lo, hi) = (self.kernel.offsets[idx], self.kernel.offsets[idx + 1]);
        (&self.kernel.next[lo..hi], &self.kernel.prob[lo..hi])
    }

    /// `sum_{s'} P(s' | s, a, b) v(s')`.
    #[inline]
    pub fn expected_next(&self, s: usize, a: usize, b: usize, v: &[f64]) -> f64 {
        let (next, prob) = self.successors(s, a, b);
        next.iter().zip(prob).map(|(&sp, &p)| p * v[sp]).sum()
    }

    /// Dense `P(s' | s, a, b)` row.
    pub fn transition_row(&self, s: usize, a: usize, b: usize) -> Vec<f64> {
        let mut row = vec![0.0; self.n_states];
        let (next, prob) = self.successors(s, a, b);
        for (&sp, &p) in next.iter().zip(prob) {
            row[sp] += p;
        }
        row
    }

    /// Reward table `r_x(s, a, b)` seen by the game: the model's value
    /// everywhere except absorbing states, which pay nothing.
    pub fn reward_table(&self, model: &RewardModel) -> Vec<f64> {
        let mut table = model.table();
        self.zero_absorbing(&mut table);
        table
    }

    /// Zeroes every `(s, a, b)` entry of a joint table at absorbing states.
    pub fn zero_absorbing(&self, table: &mut [f64]) {
        let block = self.n_actions_min * self.n_actions_max;
        for (s, chunk) in table.chunks_mut(block).enumerate() {
            if self.absorbing[s] {
                chunk.fill(0.0);
            }
        }
    }

    /// Returns a copy with a different discount factor.
    pub fn with_discount(&self, discount: f64) -> Result<Self> {
        if !(discount > 0.0 && discount < 1.0) {
            return Err(Error::InvalidGame(format!("discount {discount} outside (0, 1)")));
        }
        Ok(Self { discount, ..self.clone() })
    }

    /// Returns a copy with a different base reward table.
    pub fn with_base_reward(&self, base_reward: Vec<f64>) -> Result<Self> {
        if base_reward.len() != self.n_joint() || base_reward.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidGame("base reward has wrong length or non-finite entries".into()));
        }
        Ok(Self { base_reward, ..self.clone() })
    }

    pub fn to_document(&self) -> GameDocument {
        GameDocument::from_game(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GameDocument = serde_json::from_str(text)?;
        doc.into_game()
    }
}

#[cfg(test)]
pub(crate) mod test_games {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random dense game with full-support initial distribution.
    pub fn random_game(seed: u64, n_states: usize, n_min: usize, n_max: usize, discount: f64, tau: f64) -> MarkovGame {
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
        .unwrap()
    }
}
