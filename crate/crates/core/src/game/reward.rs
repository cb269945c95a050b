use crate::error::{Error, Result};

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One nonzero entry of a gradient over the incentive parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparseEntry {
    pub index: usize,
    pub value: f64,
}

/// Incentive-shaped reward `r_x(s,a,b) = base(s,a,b) + scale * sigmoid(x(s,a,b))`.
///
/// The incentive parameters `x` are the upper-level decision variable.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    n_states: usize,
    n_actions_min: usize,
    n_actions_max: usize,
    base: Vec<f64>,
    incentive: Vec<f64>,
    scale: f64,
}

impl RewardModel {
    /// Model with `x = 0` everywhere.
    pub fn new(n_states: usize, n_actions_min: usize, n_actions_max: usize, base: Vec<f64>, scale: f64) -> Result<Self> {
        let n = n_states * n_actions_min * n_actions_max;
        if base.len() != n {
            return Err(Error::InvalidConfig(format!("base reward has {} entries, expected {n}", base.len())));
        }
        if !scale.is_finite() || base.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidConfig("reward model must be finite".into()));
        }
        Ok(Self {
            n_states,
            n_actions_min,
            n_actions_max,
            base,
            incentive: vec![0.0; n],
            scale,
        })
    }

    /// Model over a game's base reward.
    pub fn for_game(game: &super::MarkovGame, scale: f64) -> Result<Self> {
        Self::new(
            game.n_states(),
            game.n_actions_min(),
            game.n_actions_max(),
            game.base_reward().to_vec(),
            scale,
        )
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    pub fn incentive(&self) -> &[f64] {
        &self.incentive
    }

    pub fn set_incentive(&mut self, x: Vec<f64>) -> Result<()> {
        if x.len() != self.incentive.len() {
            return Err(Error::InvalidConfig(format!(
                "incentive vector has {} entries, expected {}",
                x.len(),
                self.incentive.len()
            )));
        }
        self.incentive = x;
        Ok(())
    }

    /// `x <- x + step * direction`.
    pub fn step(&mut self, direction: &[f64], step: f64) {
        assert_eq!(direction.len(), self.incentive.len());
        for (x, d) in self.incentive.iter_mut().zip(direction) {
            *x += step * d;
        }
    }

    fn index(&self, s: usize, a: usize, b: usize) -> Result<usize> {
        if s >= self.n_states {
            return Err(Error::StateOutOfRange { index: s, n_states: self.n_states });
        }
        if a >= self.n_actions_min {
            return Err(Error::ActionOutOfRange { index: a, n_actions: self.n_actions_min });
        }
        if b >= self.n_actions_max {
            return Err(Error::ActionOutOfRange { index: b, n_actions: self.n_actions_max });
        }
        Ok((s * self.n_actions_min + a) * self.n_actions_max + b)
    }

    pub fn value(&self, s: usize, a: usize, b: usize) -> Result<f64> {
        let i = self.index(s, a, b)?;
        Ok(self.base[i] + self.scale * sigmoid(self.incentive[i]))
    }

    /// Gradient of `value(s, a, b)` with respect to `x`; one nonzero entry.
    pub fn grad_x(&self, s: usize, a: usize, b: usize) -> Result<SparseEntry> {
        let i = self.index(s, a, b)?;
        Ok(SparseEntry { index: i, value: self.slope(i) })
    }

    /// `d r_x(i) / d x(i)` at a flat joint index.
    #[inline]
    pub fn slope(&self, i: usize) -> f64 {
        let p = sigmoid(self.incentive[i]);
        self.scale * p * (1.0 - p)
    }

    /// Full reward table in joint layout.
    pub fn table(&self) -> Vec<f64> {
        self.base
            .iter()
            .zip(&self.incentive)
            .map(|(b, x)| b + self.scale * sigmoid(*x))
            .collect()
    }

    /// Table of `d r_x(i) / d x(i)`.
    pub fn slope_table(&self) -> Vec<f64> {
        (0..self.incentive.len()).map(|i| self.slope(i)).collect()
    }

    /// Upper bound on `|r_x|` over all parameters.
    pub fn bound(&self) -> f64 {
        let base = self.base.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
        base + self.scale.abs()
    }
}
