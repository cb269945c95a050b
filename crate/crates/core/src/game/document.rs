use serde::{Deserialize, Serialize};

use super::{GameParts, MarkovGame};
use crate::error::{Error, Result};

/// JSON form of a [`MarkovGame`].
///
/// `transition[s][a][b][s']` and `base_reward[s][a][b]` are dense nested
/// arrays. Floats are written in shortest round-trip form, so
/// `game -> json -> game` is bit-exact.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GameDocument {
    pub n_states: usize,
    pub n_actions_min: usize,
    pub n_actions_max: usize,
    pub discount: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    pub init_dist: Vec<f64>,
    pub transition: Vec<Vec<Vec<Vec<f64>>>>,
    pub base_reward: Vec<Vec<Vec<f64>>>,
    pub absorbing: Vec<bool>,
}

impl GameDocument {
    pub fn from_game(game: &MarkovGame) -> Self {
        let (ns, na, nb) = (game.n_states(), game.n_actions_min(), game.n_actions_max());
        let transition = (0..ns)
            .map(|s| (0..na).map(|a| (0..nb).map(|b| game.transition_row(s, a, b)).collect()).collect())
            .collect();
        let base_reward = (0..ns)
            .map(|s| {
                (0..na)
                    .map(|a| (0..nb).map(|b| game.base_reward()[game.joint_index(s, a, b)]).collect())
                    .collect()
            })
            .collect();
        Self {
            n_states: ns,
            n_actions_min: na,
            n_actions_max: nb,
            discount: game.discount(),
            tau_min: game.tau_min(),
            tau_max: game.tau_max(),
            init_dist: game.init_dist().to_vec(),
            transition,
            base_reward,
            absorbing: game.absorbing().to_vec(),
        }
    }

    pub fn into_game(self) -> Result<MarkovGame> {
        let (ns, na, nb) = (self.n_states, self.n_actions_min, self.n_actions_max);
        let shape_err = || Error::InvalidGame("nested array shape does not match declared sizes".into());
        if self.transition.len() != ns || self.base_reward.len() != ns {
            return Err(shape_err());
        }
        let mut transitions = Vec::with_capacity(ns * na * nb);
        let mut base = Vec::with_capacity(ns * na * nb);
        for s in 0..ns {
            if self.transition[s].len() != na || self.base_reward[s].len() != na {
                return Err(shape_err());
            }
            for a in 0..na {
                if self.transition[s][a].len() != nb || self.base_reward[s][a].len() != nb {
                    return Err(shape_err());
                }
                for b in 0..nb {
                    let row = &self.transition[s][a][b];
                    if row.len() != ns {
                        return Err(shape_err());
                    }
                    transitions.push(row.iter().copied().enumerate().filter(|(_, p)| *p != 0.0).collect());
                    base.push(self.base_reward[s][a][b]);
                }
            }
        }
        MarkovGame::new(GameParts {
            n_states: ns,
            n_actions_min: na,
            n_actions_max: nb,
            discount: self.discount,
            tau_min: self.tau_min,
            tau_max: self.tau_max,
            init_dist: self.init_dist,
            base_reward: base,
            absorbing: self.absorbing,
            transitions,
        })
    }
}
