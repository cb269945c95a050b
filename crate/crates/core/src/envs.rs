//! Experiment instances: the synthetic incentive-design problem and the tabular
//! 5x5 Sentinel-Intruder grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{horizon_gradients, HorizonSpec};
use crate::game::{GameParts, MarkovGame, Player, RewardModel, TabularPolicy};
use crate::optimizers::{PolicyGrads, UlObjective};
use crate::sampling::{estimate_policy_grad_with, estimate_value, sample_batch, StreamKey};

/// Expected finite-horizon cost `E[sum_{t<H} discount^t c(s_t, a_t, b_t)]` of a cost
/// table in a fixed MDP driven by the lower-level policies. No entropy terms.
#[derive(Clone, Debug)]
pub struct TrajectoryObjective {
    dynamics: MarkovGame,
    costs: Vec<f64>,
    spec: HorizonSpec,
}

impl TrajectoryObjective {
    pub fn new(dynamics: MarkovGame, mut costs: Vec<f64>, discount: f64, horizon: usize) -> Result<Self> {
        if costs.len() != dynamics.n_joint() || costs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cost table needs {} finite entries, got {}",
                dynamics.n_joint(),
                costs.len()
            )));
        }
        if horizon == 0 || !(0.0..=1.0).contains(&discount) {
            return Err(Error::InvalidConfig(format!("invalid horizon {horizon} or discount {discount}")));
        }
        dynamics.zero_absorbing(&mut costs);
        Ok(Self { dynamics, costs, spec: HorizonSpec { horizon, discount, regularized: false } })
    }

    pub fn dynamics(&self) -> &MarkovGame {
        &self.dynamics
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn spec(&self) -> HorizonSpec {
        self.spec
    }

    fn sample(&self, min: &TabularPolicy, max: &TabularPolicy, batch: usize, key: StreamKey) -> crate::sampling::Batch {
        sample_batch(&self.dynamics, &self.costs, min, max, self.spec.horizon, batch, key)
    }
}

impl UlObjective for TrajectoryObjective {
    fn value_exact(&self, _: &RewardModel, min: &TabularPolicy, max: &TabularPolicy) -> Result<f64> {
        Ok(horizon_gradients(&self.dynamics, &self.costs, min, max, self.spec)?.value)
    }

    fn grad_policies_exact(&self, _: &RewardModel, min: &TabularPolicy, max: &TabularPolicy) -> Result<PolicyGrads> {
        let g = horizon_gradients(&self.dynamics, &self.costs, min, max, self.spec)?;
        Ok(PolicyGrads { min: g.min, max: g.max })
    }

    fn grad_x_exact(&self, model: &RewardModel, _: &TabularPolicy, _: &TabularPolicy) -> Result<Vec<f64>> {
        Ok(vec![0.0; model.len()])
    }

    fn value(&self, _: &RewardModel, min: &TabularPolicy, max: &TabularPolicy, batch: usize, key: StreamKey) -> Result<(f64, u64)> {
        let b = self.sample(min, max, batch, key);
        Ok((estimate_value(&self.dynamics, min, max, &b, self.spec)?, b.env_steps()))
    }

    fn grad_policies(
        &self,
        _: &RewardModel,
        min: &TabularPolicy,
        max: &TabularPolicy,
        batch: usize,
        key: StreamKey,
    ) -> Result<(PolicyGrads, u64)> {
        let b = self.sample(min, max, batch, key);
        let grads = PolicyGrads {
            min: estimate_policy_grad_with(&self.dynamics, min, max, &b, self.spec, Player::Min)?,
            max: estimate_policy_grad_with(&self.dynamics, min, max, &b, self.spec, Player::Max)?,
        };
        Ok((grads, b.env_steps()))
    }

    /// The designer cost does not involve `x`, so this is exactly zero and samples nothing.
    fn grad_x(&self, model: &RewardModel, _: &TabularPolicy, _: &TabularPolicy, _: usize, _: StreamKey) -> Result<(Vec<f64>, u64)> {
        Ok((vec![0.0; model.len()], 0))
    }

    fn nominal_steps(&self, batch: usize) -> u64 {
        (batch * self.spec.horizon) as u64
    }

    fn nominal_steps_x(&self, _: usize) -> u64 {
        0
    }
}

/// Exact upper-level objective at `(x, phi, psi)`.
pub fn ul_value_exact(ul: &dyn UlObjective, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy) -> Result<f64> {
    ul.value_exact(model, min, max)
}

/// A built experiment.
#[derive(Clone, Debug)]
pub struct Instance {
    pub game: MarkovGame,
    pub model: RewardModel,
    pub ul: TrajectoryObjective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_states: usize,
    pub n_actions: usize,
    pub seed: u64,
    pub discount: f64,
    pub tau: f64,
    pub ul_horizon: usize,
    /// Use the lower-level kernel for the designer MDP instead of drawing a second one.
    pub share_dynamics: bool,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { n_states: 5, n_actions: 3, seed: 0, discount: 0.99, tau: 0.1, ul_horizon: 3, share_dynamics: false }
    }
}

fn random_kernel(rng: &mut ChaCha8Rng, n_joint: usize, n_states: usize) -> Vec<f64> {
    let mut dense = Vec::with_capacity(n_joint * n_states);
    for _ in 0..n_joint {
        let row: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>()).collect();
        let sum: f64 = row.iter().sum();
        dense.extend(row.iter().map(|p| p / sum));
    }
    dense
}

/// Random game with reward `r_base + sigmoid(x)` and designer cost `-r_id` over
/// `ul_horizon` steps of the designer MDP, both started from the uniform distribution.
pub fn build_synthetic(spec: &SyntheticSpec) -> Result<Instance> {
    if spec.n_states == 0 || spec.n_actions == 0 {
        return Err(Error::InvalidConfig("synthetic instance needs states and actions".into()));
    }
    let (n, k) = (spec.n_states, spec.n_actions);
    let n_joint = n * k * k;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let kernel = random_kernel(&mut rng, n_joint, n);
    let base: Vec<f64> = (0..n_joint).map(|_| rng.gen()).collect();
    let r_id: Vec<f64> = (0..n_joint).map(|_| rng.gen()).collect();
    let kernel_id = if spec.share_dynamics { kernel.clone() } else { random_kernel(&mut rng, n_joint, n) };
    let rho = vec![1.0 / n as f64; n];

    let game = MarkovGame::from_dense(n, k, k, spec.discount, spec.tau, spec.tau, rho.clone(), base, vec![false; n], &kernel)?;
    let dynamics =
        MarkovGame::from_dense(n, k, k, spec.discount, spec.tau, spec.tau, rho, vec![0.0; n_joint], vec![false; n], &kernel_id)?;
    let model = RewardModel::for_game(&game, 1.0)?;
    let ul = TrajectoryObjective::new(dynamics, r_id.iter().map(|r| -r).collect(), spec.discount, spec.ul_horizon)?;
    Ok(Instance { game, model, ul })
}

/// Grid cell as `[row, col]`.
pub type Cell = [usize; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub sentinel_spawn: Cell,
    pub intruder_spawn: Vec<Cell>,
    pub target: Cell,
    pub restricted: Vec<Cell>,
    pub payoff: f64,
    pub incentive_scale: f64,
    pub max_steps: usize,
    pub discount: f64,
    pub tau: f64,
    /// Also capture when the two agents swap cells in one move.
    pub capture_on_swap: bool,
}

impl Default for GridSpec {
    fn default() -> Self {
        let restricted = (1..=3).flat_map(|r| [[r, 3], [r, 4]]).collect();
        Self {
            width: 5,
            height: 5,
            sentinel_spawn: [0, 4],
            intruder_spawn: vec![[0, 0], [0, 1], [1, 0]],
            target: [4, 4],
            restricted,
            payoff: 10.0,
            incentive_scale: 0.05,
            max_steps: 20,
            discount: 0.99,
            tau: 0.1,
            capture_on_swap: false,
        }
    }
}

/// Moves in action order: up, down, left, right, stay.
pub const MOVES: [(isize, isize); 5] = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)];

/// Outcome of one simultaneous move.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transition {
    Continue { sentinel: Cell, intruder: Cell },
    Capture,
    Breach,
}

impl GridSpec {
    pub fn n_cells(&self) -> usize {
        self.width * self.height
    }

    /// Joint positions plus one terminal state.
    pub fn n_states(&self) -> usize {
        self.n_cells() * self.n_cells() + 1
    }

    pub fn terminal(&self) -> usize {
        self.n_cells() * self.n_cells()
    }

    pub fn cell_index(&self, c: Cell) -> usize {
        c[0] * self.width + c[1]
    }

    pub fn cell(&self, index: usize) -> Cell {
        [index / self.width, index % self.width]
    }

    pub fn state(&self, sentinel: Cell, intruder: Cell) -> usize {
        self.cell_index(sentinel) * self.n_cells() + self.cell_index(intruder)
    }

    /// `(sentinel, intruder)` of a non-terminal state.
    pub fn positions(&self, s: usize) -> Option<(Cell, Cell)> {
        (s < self.terminal()).then(|| (self.cell(s / self.n_cells()), self.cell(s % self.n_cells())))
    }

    fn inside(&self, c: Cell) -> bool {
        c[0] < self.height && c[1] < self.width
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.width == 0 || self.height == 0 {
            return bad("grid must be nonempty".into());
        }
        let cells = std::iter::once(&self.sentinel_spawn)
            .chain(&self.intruder_spawn)
            .chain(std::iter::once(&self.target))
            .chain(&self.restricted);
        if let Some(c) = cells.clone().find(|c| !self.inside(**c)) {
            return bad(format!("cell {c:?} outside the {}x{} grid", self.height, self.width));
        }
        if self.intruder_spawn.is_empty() {
            return bad("intruder spawn region is empty".into());
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1".into());
        }
        if !(self.payoff.is_finite() && self.incentive_scale.is_finite()) {
            return bad("payoff and incentive scale must be finite".into());
        }
        Ok(())
    }

    pub fn shift(&self, c: Cell, action: usize) -> Cell {
        let (dr, dc) = MOVES[action];
        let r = (c[0] as isize + dr).clamp(0, self.height as isize - 1);
        let col = (c[1] as isize + dc).clamp(0, self.width as isize - 1);
        [r as usize, col as usize]
    }

    /// Intruder plays `intruder_action`, sentinel `sentinel_action`.
    pub fn step(&self, sentinel: Cell, intruder: Cell, intruder_action: usize, sentinel_action: usize) -> Transition {
        if sentinel == intruder {
            return Transition::Capture;
        }
        if intruder == self.target {
            return Transition::Breach;
        }
        let s = self.shift(sentinel, sentinel_action);
        let i = self.shift(intruder, intruder_action);
        if s == i || (self.capture_on_swap && s == intruder && i == sentinel) {
            Transition::Capture
        } else if i == self.target {
            Transition::Breach
        } else {
            Transition::Continue { sentinel: s, intruder: i }
        }
    }

    /// ASCII layout: `S` sentinel spawn, `I` intruder spawn, `T` target, `#` restricted.
    pub fn layout(&self) -> String {
        let mut out = String::new();
        for r in 0..self.height {
            for c in 0..self.width {
                let cell = [r, c];
                let ch = if cell == self.sentinel_spawn {
                    'S'
                } else if self.intruder_spawn.contains(&cell) {
                    'I'
                } else if cell == self.target {
                    'T'
                } else if self.restricted.contains(&cell) {
                    '#'
                } else {
                    '.'
                };
                out.push(ch);
            }
            out.push('\n');
        }
        out
    }
}

/// Tabular Sentinel-Intruder. The intruder is the min player, the sentinel the max
/// player; capture pays `+payoff`, the intruder reaching the target `-payoff`.
/// The designer cost counts sentinel steps in restricted cells over `max_steps`.
pub fn build_sentinel(spec: &GridSpec) -> Result<Instance> {
    spec.validate()?;
    let n = spec.n_states();
    let terminal = spec.terminal();
    let na = MOVES.len();
    let n_joint = n * na * na;
    let mut transitions = Vec::with_capacity(n_joint);
    let mut base = vec![0.0; n_joint];
    let mut costs = vec![0.0; n_joint];
    for s in 0..n {
        for a in 0..na {
            for b in 0..na {
                let idx = (s * na + a) * na + b;
                let Some((sentinel, intruder)) = spec.positions(s) else {
                    transitions.push(vec![(terminal, 1.0)]);
                    continue;
                };
                let next = match spec.step(sentinel, intruder, a, b) {
                    Transition::Capture => {
                        base[idx] = spec.payoff;
                        terminal
                    }
                    Transition::Breach => {
                        base[idx] = -spec.payoff;
                        terminal
                    }
                    Transition::Continue { sentinel, intruder } => spec.state(sentinel, intruder),
                };
                transitions.push(vec![(next, 1.0)]);
                if spec.restricted.contains(&sentinel) {
                    costs[idx] = 1.0;
                }
            }
        }
    }
    let mut init = vec![0.0; n];
    let w = 1.0 / spec.intruder_spawn.len() as f64;
    for &c in &spec.intruder_spawn {
        init[spec.state(spec.sentinel_spawn, c)] += w;
    }
    let mut absorbing = vec![false; n];
    absorbing[terminal] = true;
    let game = MarkovGame::new(GameParts {
        n_states: n,
        n_actions_min: na,
        n_actions_max: na,
        discount: spec.discount,
        tau_min: spec.tau,
        tau_max: spec.tau,
        init_dist: init,
        base_reward: base,
        absorbing,
        transitions,
    })?;
    let model = RewardModel::for_game(&game, spec.incentive_scale)?;
    let ul = TrajectoryObjective::new(game.clone(), costs, 1.0, spec.max_steps)?;
    Ok(Instance { game, model, ul })
}
