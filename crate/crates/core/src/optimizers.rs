//! PANDA (penalty-augmented Nikaido-Isoda descent-ascent) and the comparison methods.
//!
//! Every optimizer works on an [`OptimizerState`] holding the incentive parameters
//! `x`, the policy pair `(phi, psi)` and, for PANDA, the shadow best-response pair
//! `(phi~, psi~)`. Runs emit one [`RunRecord`] per outer iteration; exact metrics are
//! attached at evaluation points.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::{best_response_table, game_gradients, ni_gap_table};
use crate::game::{MarkovGame, Player, RewardModel, TabularPolicy};
use crate::sampling::{estimate_grad_x, estimate_policy_grad_with, game_spec, sample_batch, StreamKey};

/// Hyperparameters of the double loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PandaConfig {
    /// Penalty coefficient.
    pub lambda: f64,
    pub eta_x: f64,
    /// Step size of the penalty subproblem on `(phi, psi)`.
    pub eta_theta: f64,
    /// Step size of the shadow min-player `phi~`.
    pub eta_min: f64,
    /// Step size of the shadow max-player `psi~`.
    pub eta_max: f64,
    pub inner_iters: usize,
    pub outer_iters: usize,
    /// Upper-level batch size `B`.
    pub batch_ul: usize,
    /// Lower-level batch size `B_J`.
    pub batch_traj: usize,
    /// Lower-level truncation horizon `H`.
    pub horizon: usize,
    pub seed: u64,
}

impl Default for PandaConfig {
    fn default() -> Self {
        Self {
            lambda: 4.0,
            eta_x: 0.05,
            eta_theta: 0.1,
            eta_min: 0.1,
            eta_max: 0.1,
            inner_iters: 10,
            outer_iters: 100,
            batch_ul: 16,
            batch_traj: 16,
            horizon: 3,
            seed: 0,
        }
    }
}

impl PandaConfig {
    pub fn validate(&self) -> Result<()> {
        let steps = [self.eta_x, self.eta_theta, self.eta_min, self.eta_max];
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda must be positive, got {}", self.lambda)));
        }
        if steps.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidConfig(format!("step sizes must be finite and nonnegative, got {steps:?}")));
        }
        if self.inner_iters == 0 || self.outer_iters == 0 {
            return Err(Error::InvalidConfig("inner_iters and outer_iters must be at least 1".into()));
        }
        if self.batch_ul == 0 || self.batch_traj == 0 || self.horizon == 0 {
            return Err(Error::InvalidConfig("batch sizes and horizon must be at least 1".into()));
        }
        Ok(())
    }
}

/// Gradient of the upper-level objective with respect to the policy logits.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyGrads {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

/// Upper-level objective `f(x, phi, psi)`, minimized.
///
/// Stochastic methods return the estimate and the number of environment steps it
/// consumed. Estimators must be unbiased for the objective `value_exact` reports.
pub trait UlObjective: Send + Sync {
    fn value_exact(&self, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy) -> Result<f64>;

    fn grad_policies_exact(&self, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy) -> Result<PolicyGrads>;

    fn grad_x_exact(&self, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy) -> Result<Vec<f64>>;

    fn value(&self, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy, batch: usize, key: StreamKey)
        -> Result<(f64, u64)>;

    fn grad_policies(
        &self,
        model: &RewardModel,
        min: &TabularPolicy,
        max: &TabularPolicy,
        batch: usize,
        key: StreamKey,
    ) -> Result<(PolicyGrads, u64)>;

    fn grad_x(&self, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy, batch: usize, key: StreamKey)
        -> Result<(Vec<f64>, u64)>;

    /// Environment steps charged to an exact call standing in for a batch of `batch`
    /// policy-gradient trajectories (used by the oracle's step accounting).
    fn nominal_steps(&self, batch: usize) -> u64;

    /// Steps charged for one `grad_x` call.
    fn nominal_steps_x(&self, batch: usize) -> u64 {
        self.nominal_steps(batch)
    }
}

/// `f = 0`.
#[derive(Clone, Debug)]
pub struct ZeroObjective {
    n_joint: usize,
    n_min: usize,
    n_max: usize,
}

impl ZeroObjective {
    pub fn for_game(game: &MarkovGame) -> Self {
        Self {
            n_joint: game.n_joint(),
            n_min: game.n_states() * game.n_actions_min(),
            n_max: game.n_states() * game.n_actions_max(),
        }
    }

    fn zeros(&self) -> PolicyGrads {
        PolicyGrads { min: vec![0.0; self.n_min], max: vec![0.0; self.n_max] }
    }
}

impl UlObjective for ZeroObjective {
    fn value_exact(&self, _: &RewardModel, _: &TabularPolicy, _: &TabularPolicy) -> Result<f64> {
        Ok(0.0)
    }

    fn grad_policies_exact(&self, _: &RewardModel, _: &TabularPolicy, _: &TabularPolicy) -> Result<PolicyGrads> {
        Ok(self.zeros())
    }

    fn grad_x_exact(&self, _: &RewardModel, _: &TabularPolicy, _: &TabularPolicy) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.n_joint])
    }

    fn value(&self, _: &RewardModel, _: &TabularPolicy, _: &TabularPolicy, _: usize, _: StreamKey) -> Result<(f64, u64)> {
        Ok((0.0, 0))
    }

    fn grad_policies(&self, _: &RewardModel, _: &TabularPolicy, _: &TabularPolicy, _: usize, _: StreamKey) -> Result<(PolicyGrads, u64)> {
        Ok((self.zeros(), 0))
    }

    fn grad_x(&self, _: &RewardModel, _: &TabularPolicy, _: &TabularPolicy, _: usize, _: StreamKey) -> Result<(Vec<f64>, u64)> {
        Ok((vec![0.0; self.n_joint], 0))
    }

    fn nominal_steps(&self, _: usize) -> u64 {
        0
    }
}

/// Iterates of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub model: RewardModel,
    pub min: TabularPolicy,
    pub max: TabularPolicy,
    pub shadow_min: TabularPolicy,
    pub shadow_max: TabularPolicy,
    /// Completed outer iterations.
    pub outer: usize,
    /// Inner iterations completed in the current outer iteration.
    pub inner: usize,
    pub env_steps: u64,
}

impl OptimizerState {
    /// Uniform policies; shadows start at the policies.
    pub fn new(game: &MarkovGame, model: RewardModel) -> Self {
        let min = TabularPolicy::uniform(game.n_states(), game.n_actions_min());
        let max = TabularPolicy::uniform(game.n_states(), game.n_actions_max());
        Self::with_policies(model, min, max)
    }

    pub fn with_policies(model: RewardModel, min: TabularPolicy, max: TabularPolicy) -> Self {
        Self {
            model,
            shadow_min: min.clone(),
            shadow_max: max.clone(),
            min,
            max,
            outer: 0,
            inner: 0,
            env_steps: 0,
        }
    }
}

/// Exact metrics of a state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub ul_objective: f64,
    pub ne_gap: f64,
}

/// One outer iteration. Exact metrics are present at evaluation points only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    /// 1-based index of the completed outer iteration.
    pub outer_iter: usize,
    pub env_steps: u64,
    pub ul_objective: Option<f64>,
    pub ne_gap: Option<f64>,
    /// Norm of the `x` update direction.
    pub grad_norm: f64,
    pub wall_ms: u64,
}

impl RunRecord {
    pub fn evaluation(&self) -> Option<Evaluation> {
        Some(Evaluation { ul_objective: self.ul_objective?, ne_gap: self.ne_gap? })
    }
}

#[derive(Clone, Debug)]
pub struct History {
    /// Metrics before the first iteration.
    pub initial: Evaluation,
    pub records: Vec<RunRecord>,
    pub state: OptimizerState,
}

impl History {
    /// Last record carrying exact metrics.
    pub fn final_evaluation(&self) -> Evaluation {
        self.records.iter().rev().find_map(RunRecord::evaluation).unwrap_or(self.initial)
    }

    pub fn env_steps(&self) -> u64 {
        self.state.env_steps
    }
}

/// Run controls shared by all optimizers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunOptions {
    /// Outer iterations between exact evaluations; the last iteration is always evaluated.
    pub eval_every: usize,
    /// Stop after the first outer iteration that reaches this many environment steps.
    pub env_step_budget: Option<u64>,
    /// Fill `wall_ms`; off by default so output is reproducible.
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { eval_every: 5, env_step_budget: None, timing: false }
    }
}

/// The bilevel instance an optimizer runs on.
#[derive(Clone, Copy)]
pub struct Problem<'a> {
    pub game: &'a MarkovGame,
    pub ul: &'a dyn UlObjective,
}

/// Exact UL objective and NI gap at the current iterate.
pub fn evaluate(problem: Problem<'_>, state: &OptimizerState) -> Result<Evaluation> {
    let rewards = problem.game.reward_table(&state.model);
    let gap = ni_gap_table(problem.game, &rewards, &state.min, &state.max)?.gap;
    let ul_objective = problem.ul.value_exact(&state.model, &state.min, &state.max)?;
    Ok(Evaluation { ul_objective, ne_gap: gap })
}

// Stream tags of the estimator calls within one iteration.
const TAG_SHADOW_MIN: u64 = 0;
const TAG_SHADOW_MAX: u64 = 1;
const TAG_UL: u64 = 2;
const TAG_PENALTY_MIN: u64 = 3;
const TAG_PENALTY_MAX: u64 = 4;
const TAG_UL_X: u64 = 5;
const TAG_X_MIN: u64 = 6;
const TAG_X_MAX: u64 = 7;

fn check_finite(what: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|g| !g.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what}: entry {i} is {}", v[i]))),
        None => Ok(()),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Sampled lower-level gradients at one `(x, config)`.
struct Sampler<'a> {
    game: &'a MarkovGame,
    rewards: Vec<f64>,
    config: &'a PandaConfig,
    outer: u64,
}

impl<'a> Sampler<'a> {
    fn new(game: &'a MarkovGame, model: &RewardModel, config: &'a PandaConfig, outer: usize) -> Self {
        Self { game, rewards: game.reward_table(model), config, outer: outer as u64 }
    }

    fn key(&self, inner: usize, tag: u64) -> StreamKey {
        StreamKey::new(self.config.seed, self.outer, inner as u64, tag)
    }

    fn policy_grad(
        &self,
        min: &TabularPolicy,
        max: &TabularPolicy,
        side: Player,
        key: StreamKey,
        steps: &mut u64,
    ) -> Result<Vec<f64>> {
        let c = self.config;
        let batch = sample_batch(self.game, &self.rewards, min, max, c.horizon, c.batch_traj, key);
        *steps += batch.env_steps();
        let g = estimate_policy_grad_with(self.game, min, max, &batch, game_spec(self.game, c.horizon), side)?;
        check_finite("policy gradient estimate", &g)?;
        Ok(g)
    }

    fn grad_x(&self, model: &RewardModel, min: &TabularPolicy, max: &TabularPolicy, key: StreamKey, steps: &mut u64) -> Result<Vec<f64>> {
        let c = self.config;
        let batch = sample_batch(self.game, &self.rewards, min, max, c.horizon, c.batch_traj, key);
        *steps += batch.env_steps();
        let g = estimate_grad_x(self.game, model, &batch)?;
        check_finite("incentive gradient estimate", &g)?;
        Ok(g)
    }
}

fn ul_policy_grads(ul: &dyn UlObjective, state: &OptimizerState, batch: usize, key: StreamKey, steps: &mut u64) -> Result<PolicyGrads> {
    let (g, used) = ul.grad_policies(&state.model, &state.min, &state.max, batch, key)?;
    check_finite("upper-level policy gradient", &g.min)?;
    check_finite("upper-level policy gradient", &g.max)?;
    *steps += used;
    Ok(g)
}

/// Applies `(phi, psi) <- (phi, psi) - eta_theta g` with
/// `g = (f_phi / lambda + a, f_psi / lambda - c)`.
fn penalty_step(state: &mut OptimizerState, config: &PandaConfig, f: &PolicyGrads, a: &[f64], c: &[f64]) -> Result<()> {
    let inv = 1.0 / config.lambda;
    let g_min: Vec<f64> = f.min.iter().zip(a).map(|(fm, a)| inv * fm + a).collect();
    let g_max: Vec<f64> = f.max.iter().zip(c).map(|(fm, c)| inv * fm - c).collect();
    state.min.step(&g_min, -config.eta_theta)?;
    state.max.step(&g_max, -config.eta_theta)
}

/// One inner iteration: shadow best-response steps, then a step on the penalty
/// surrogate `f / lambda + g~` at the updated shadows.
pub fn panda_inner_step(state: &mut OptimizerState, config: &PandaConfig, problem: Problem<'_>) -> Result<()> {
    let sampler = Sampler::new(problem.game, &state.model, config, state.outer);
    let k = state.inner;
    let mut steps = 0;

    let u = sampler.policy_grad(&state.shadow_min, &state.max, Player::Min, sampler.key(k, TAG_SHADOW_MIN), &mut steps)?;
    let v = sampler.policy_grad(&state.min, &state.shadow_max, Player::Max, sampler.key(k, TAG_SHADOW_MAX), &mut steps)?;
    state.shadow_min.step(&u, -config.eta_min)?;
    state.shadow_max.step(&v, config.eta_max)?;

    let f = ul_policy_grads(problem.ul, state, config.batch_ul, sampler.key(k, TAG_UL), &mut steps)?;
    let a = sampler.policy_grad(&state.min, &state.shadow_max, Player::Min, sampler.key(k, TAG_PENALTY_MIN), &mut steps)?;
    let c = sampler.policy_grad(&state.shadow_min, &state.max, Player::Max, sampler.key(k, TAG_PENALTY_MAX), &mut steps)?;
    penalty_step(state, config, &f, &a, &c)?;

    state.inner += 1;
    state.env_steps += steps;
    Ok(())
}

/// `l = grad_x f + lambda (grad_x J(x, phi, psi~) - grad_x J(x, phi~, psi))`.
fn sampled_hypergradient(state: &OptimizerState, config: &PandaConfig, problem: Problem<'_>, inner: usize) -> Result<(Vec<f64>, u64)> {
    let sampler = Sampler::new(problem.game, &state.model, config, state.outer);
    let (fx, mut steps) = problem.ul.grad_x(&state.model, &state.min, &state.max, config.batch_ul, sampler.key(inner, TAG_UL_X))?;
    check_finite("upper-level incentive gradient", &fx)?;
    let hi = sampler.grad_x(&state.model, &state.min, &state.shadow_max, sampler.key(inner, TAG_X_MIN), &mut steps)?;
    let lo = sampler.grad_x(&state.model, &state.shadow_min, &state.max, sampler.key(inner, TAG_X_MAX), &mut steps)?;
    let l = fx.iter().zip(hi.iter().zip(&lo)).map(|(f, (h, l))| f + config.lambda * (h - l)).collect();
    Ok((l, steps))
}

/// The `x` update closing an outer iteration. Returns `||l||`.
///
/// Policies and shadows are left in place, so the next outer iteration starts from
/// this iteration's inner terminals.
pub fn panda_outer_step(state: &mut OptimizerState, config: &PandaConfig, problem: Problem<'_>) -> Result<f64> {
    let (l, steps) = sampled_hypergradient(state, config, problem, state.inner)?;
    state.model.step(&l, -config.eta_x);
    state.env_steps += steps;
    state.outer += 1;
    state.inner = 0;
    Ok(norm(&l))
}

/// Nominal step count of one sampled lower-level estimator call.
fn ll_nominal(config: &PandaConfig) -> u64 {
    (config.batch_traj * config.horizon) as u64
}

/// Exact lower-level quantities at `x`.
struct Exact<'a> {
    game: &'a MarkovGame,
    rewards: Vec<f64>,
}

impl<'a> Exact<'a> {
    fn new(game: &'a MarkovGame, model: &RewardModel) -> Self {
        Self { game, rewards: game.reward_table(model) }
    }

    fn best_response(&self, fixed: &TabularPolicy, responder: Player) -> Result<TabularPolicy> {
        Ok(best_response_table(self.game, &self.rewards, fixed, responder)?.policy)
    }

    fn grads(&self, min: &TabularPolicy, max: &TabularPolicy) -> Result<crate::exact::GameGradients> {
        game_gradients(self.game, &self.rewards, min, max)
    }
}

/// Inner iteration of the oracle: shadows set to exact best responses, then an
/// exact step on `f / lambda + g`.
pub fn oracle_inner_step(state: &mut OptimizerState, config: &PandaConfig, problem: Problem<'_>) -> Result<()> {
    let exact = Exact::new(problem.game, &state.model);
    state.shadow_min = exact.best_response(&state.max, Player::Min)?;
    state.shadow_max = exact.best_response(&state.min, Player::Max)?;
    let f = problem.ul.grad_policies_exact(&state.model, &state.min, &state.max)?;
    let a = exact.grads(&state.min, &state.shadow_max)?.min;
    let c = exact.grads(&state.shadow_min, &state.max)?.max;
    penalty_step(state, config, &f, &a, &c)?;
    state.inner += 1;
    state.env_steps += 4 * ll_nominal(config) + problem.ul.nominal_steps(config.batch_ul);
    Ok(())
}

/// Exact `grad_x L_lambda(x, phi, psi)` with exact best responses to the current pair.
pub fn exact_hypergradient(state: &OptimizerState, config: &PandaConfig, problem: Problem<'_>) -> Result<Vec<f64>> {
    let exact = Exact::new(problem.game, &state.model);
    let br_min = exact.best_response(&state.max, Player::Min)?;
    let br_max = exact.best_response(&state.min, Player::Max)?;
    let fx = problem.ul.grad_x_exact(&state.model, &state.min, &state.max)?;
    let hi = exact.grads(&state.min, &br_max)?.incentive(&state.model);
    let lo = exact.grads(&br_min, &state.max)?.incentive(&state.model);
    Ok(fx.iter().zip(hi.iter().zip(&lo)).map(|(f, (h, l))| f + config.lambda * (h - l)).collect())
}

pub fn oracle_outer_step(state: &mut OptimizerState, config: &PandaConfig, problem: Problem<'_>) -> Result<f64> {
    let l = exact_hypergradient(state, config, problem)?;
    check_finite("exact hypergradient", &l)?;
    state.model.step(&l, -config.eta_x);
    state.env_steps += 2 * ll_nominal(config) + problem.ul.nominal_steps_x(config.batch_ul);
    state.outer += 1;
    state.inner = 0;
    Ok(norm(&l))
}

/// One PBRL outer iteration: cold-started `K`-step best-response loop, then a joint
/// step on `f + lambda g~` over `(x, phi, psi)`.
pub fn pbrl_step(state: &mut OptimizerState, config: &PandaConfig, problem: Problem<'_>) -> Result<f64> {
    let sampler = Sampler::new(problem.game, &state.model, config, state.outer);
    let mut steps = 0;
    state.shadow_min = state.min.clone();
    state.shadow_max = state.max.clone();
    for k in 0..config.inner_iters {
        let u = sampler.policy_grad(&state.shadow_min, &state.max, Player::Min, sampler.key(k, TAG_SHADOW_MIN), &mut steps)?;
        let v = sampler.policy_grad(&state.min, &state.shadow_max, Player::Max, sampler.key(k, TAG_SHADOW_MAX), &mut steps)?;
        state.shadow_min.step(&u, -config.eta_min)?;
        state.shadow_max.step(&v, config.eta_max)?;
    }
    let k = config.inner_iters;
    let f = ul_policy_grads(problem.ul, state, config.batch_ul, sampler.key(k, TAG_UL), &mut steps)?;
    let a = sampler.policy_grad(&state.min, &state.shadow_max, Player::Min, sampler.key(k, TAG_PENALTY_MIN), &mut steps)?;
    let c = sampler.policy_grad(&state.shadow_min, &state.max, Player::Max, sampler.key(k, TAG_PENALTY_MAX), &mut steps)?;
    let (l, x_steps) = sampled_hypergradient(state, config, problem, k)?;
    let g_min: Vec<f64> = f.min.iter().zip(&a).map(|(f, a)| f + config.lambda * a).collect();
    let g_max: Vec<f64> = f.max.iter().zip(&c).map(|(f, c)| f - config.lambda * c).collect();
    state.min.step(&g_min, -config.eta_theta)?;
    state.max.step(&g_max, -config.eta_theta)?;
    state.model.step(&l, -config.eta_x);
    state.env_steps += steps + x_steps;
    state.outer += 1;
    Ok(norm(&l))
}

/// One alternating iteration: descent on `J` for `phi`, ascent for `psi`, then a
/// policy-gradient step on `f` for `x`.
pub fn alternating_step(state: &mut OptimizerState, config: &PandaConfig, problem: Problem<'_>) -> Result<f64> {
    let sampler = Sampler::new(problem.game, &state.model, config, state.outer);
    let mut steps = 0;
    let u = sampler.policy_grad(&state.min, &state.max, Player::Min, sampler.key(0, TAG_SHADOW_MIN), &mut steps)?;
    let v = sampler.policy_grad(&state.min, &state.max, Player::Max, sampler.key(0, TAG_SHADOW_MAX), &mut steps)?;
    let (fx, x_steps) = problem.ul.grad_x(&state.model, &state.min, &state.max, config.batch_ul, sampler.key(0, TAG_UL_X))?;
    check_finite("upper-level incentive gradient", &fx)?;
    state.min.step(&u, -config.eta_min)?;
    state.max.step(&v, config.eta_max)?;
    state.model.step(&fx, -config.eta_x);
    state.shadow_min = state.min.clone();
    state.shadow_max = state.max.clone();
    state.env_steps += steps + x_steps;
    state.outer += 1;
    Ok(norm(&fx))
}

/// Which optimizer to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Panda,
    Oracle,
    Pbrl,
    Alternating,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Panda, Method::Oracle, Method::Pbrl, Method::Alternating];

    pub fn name(self) -> &'static str {
        match self {
            Method::Panda => "panda",
            Method::Oracle => "oracle",
            Method::Pbrl => "pbrl",
            Method::Alternating => "alternating",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown optimizer '{s}'")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn outer_iteration(method: Method, state: &mut OptimizerState, config: &PandaConfig, problem: Problem<'_>) -> Result<f64> {
    match method {
        Method::Panda => {
            for _ in 0..config.inner_iters {
                panda_inner_step(state, config, problem)?;
            }
            panda_outer_step(state, config, problem)
        }
        Method::Oracle => {
            for _ in 0..config.inner_iters {
                oracle_inner_step(state, config, problem)?;
            }
            oracle_outer_step(state, config, problem)
        }
        Method::Pbrl => pbrl_step(state, config, problem),
        Method::Alternating => alternating_step(state, config, problem),
    }
}

/// Runs `method` from `state` for `config.outer_iters` outer iterations (or until the
/// step budget is reached), calling `observer` on every record as it is produced.
pub fn run(
    method: Method,
    config: &PandaConfig,
    problem: Problem<'_>,
    mut state: OptimizerState,
    options: RunOptions,
    observer: &mut dyn FnMut(&RunRecord),
) -> Result<History> {
    config.validate()?;
    if options.eval_every == 0 {
        return Err(Error::InvalidConfig("eval_every must be at least 1".into()));
    }
    let start = Instant::now();
    let initial = evaluate(problem, &state)?;
    let mut records = Vec::new();
    for t in 1..=config.outer_iters {
        let grad_norm = outer_iteration(method, &mut state, config, problem)?;
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("hypergradient norm at outer iteration {t}")));
        }
        let exhausted = options.env_step_budget.is_some_and(|b| state.env_steps >= b);
        let last = t == config.outer_iters || exhausted;
        let eval = if last || t % options.eval_every == 0 { Some(evaluate(problem, &state)?) } else { None };
        let record = RunRecord {
            outer_iter: t,
            env_steps: state.env_steps,
            ul_objective: eval.map(|e| e.ul_objective),
            ne_gap: eval.map(|e| e.ne_gap),
            grad_norm,
            wall_ms: if options.timing { start.elapsed().as_millis() as u64 } else { 0 },
        };
        observer(&record);
        records.push(record);
        if last {
            break;
        }
    }
    Ok(History { initial, records, state })
}

pub fn run_panda(config: &PandaConfig, problem: Problem<'_>, state: OptimizerState, options: RunOptions) -> Result<History> {
    run(Method::Panda, config, problem, state, options, &mut |_| {})
}

pub fn run_oracle(config: &PandaConfig, problem: Problem<'_>, state: OptimizerState, options: RunOptions) -> Result<History> {
    run(Method::Oracle, config, problem, state, options, &mut |_| {})
}

pub fn run_pbrl(config: &PandaConfig, problem: Problem<'_>, state: OptimizerState, options: RunOptions) -> Result<History> {
    run(Method::Pbrl, config, problem, state, options, &mut |_| {})
}

pub fn run_alternating(config: &PandaConfig, problem: Problem<'_>, state: OptimizerState, options: RunOptions) -> Result<History> {
    run(Method::Alternating, config, problem, state, options, &mut |_| {})
}
