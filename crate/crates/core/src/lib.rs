//! Penalty-based first-order bilevel optimization over entropy-regularized
//! two-player zero-sum Markov games.
//!
//! The crate is organised bottom-up:
//!
//! * [`game`]: tabular game model, incentive-parameterized rewards and softmax policies.
//! * [`exact`]: dynamic programming for the regularized game (policy evaluation,
//!   soft min-max Bellman operators, Nash equilibria, best responses, the
//!   Nikaido-Isoda gap, visitation measures and closed-form gradients).
//! * [`sampling`]: seeded Monte-Carlo rollouts and truncated-horizon REINFORCE estimators.
//! * [`optimizers`]: the penalty-augmented NI descent-ascent double loop (PANDA) and
//!   the comparison methods.
//! * [`envs`]: the synthetic incentive-design problem and the tabular Sentinel-Intruder grid.
//! * [`checks`]: property suites (operators, gradients, estimators, PL inequalities).

pub mod checks;
pub mod envs;
pub mod error;
pub mod exact;
pub mod game;
pub mod optimizers;
pub mod sampling;

pub use error::{Error, Result};
pub use game::{MarkovGame, Player, RewardModel, TabularPolicy};
