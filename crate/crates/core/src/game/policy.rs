use crate::error::{Error, Result};

/// Per-state softmax policy over a finite action set.
///
/// Logits are the optimization variables; probabilities and log-probabilities
/// are cached and refreshed on every mutation.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    n_states: usize,
    n_actions: usize,
    logits: Vec<f64>,
    probs: Vec<f64>,
    log_probs: Vec<f64>,
}

impl TabularPolicy {
    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self::from_logits(n_states, n_actions, vec![0.0; n_states * n_actions]).expect("zero logits are valid")
    }

    pub fn from_logits(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidPolicy("policy needs at least one state and action".into()));
        }
        if logits.len() != n_states * n_actions {
            return Err(Error::InvalidPolicy(format!(
                "{} logits for {n_states} states x {n_actions} actions",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("policy logits".into()));
        }
        let mut p = Self {
            n_states,
            n_actions,
            logits,
            probs: vec![0.0; n_states * n_actions],
            log_probs: vec![0.0; n_states * n_actions],
        };
        p.refresh();
        Ok(p)
    }

    /// Policy whose logits are the log of the given (strictly positive) probabilities.
    pub fn from_probs(n_states: usize, n_actions: usize, probs: &[f64]) -> Result<Self> {
        if probs.iter().any(|p| !(*p > 0.0)) {
            return Err(Error::InvalidPolicy("probabilities must be strictly positive".into()));
        }
        Self::from_logits(n_states, n_actions, probs.iter().map(|p| p.ln()).collect())
    }

    fn refresh(&mut self) {
        let n = self.n_actions;
        for s in 0..self.n_states {
            let row = &self.logits[s * n..(s + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|l| (l - max).exp()).sum();
            let lse = max + sum.ln();
            for a in 0..n {
                self.log_probs[s * n + a] = row[a] - lse;
                self.probs[s * n + a] = (row[a] - max).exp() / sum;
            }
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn set_logits(&mut self, logits: Vec<f64>) -> Result<()> {
        *self = Self::from_logits(self.n_states, self.n_actions, logits)?;
        Ok(())
    }

    /// `logits <- logits + step * direction`.
    pub fn step(&mut self, direction: &[f64], step: f64) -> Result<()> {
        if direction.len() != self.logits.len() {
            return Err(Error::InvalidPolicy(format!(
                "update has {} entries, expected {}",
                direction.len(),
                self.logits.len()
            )));
        }
        if direction.iter().any(|d| !d.is_finite()) {
            return Err(Error::NonFinite("policy update".into()));
        }
        for (l, d) in self.logits.iter_mut().zip(direction) {
            *l += step * d;
        }
        self.refresh();
        Ok(())
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::StateOutOfRange { index: s, n_states: self.n_states });
        }
        Ok(())
    }

    /// Action distribution at `state`.
    pub fn probs(&self, state: usize) -> Result<&[f64]> {
        self.check_state(state)?;
        Ok(self.row(state))
    }

    /// Unchecked-by-`Result` row access; panics on an out-of-range state.
    #[inline]
    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state * self.n_actions..(state + 1) * self.n_actions]
    }

    #[inline]
    pub fn log_row(&self, state: usize) -> &[f64] {
        &self.log_probs[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn prob_table(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_prob_table(&self) -> &[f64] {
        &self.log_probs
    }

    /// Score `grad_logits log pi(action | state)` restricted to the row of
    /// `state` (every other row is zero): `onehot(action) - pi(. | state)`.
    pub fn score(&self, state: usize, action: usize) -> Result<Vec<f64>> {
        self.check_state(state)?;
        if action >= self.n_actions {
            return Err(Error::ActionOutOfRange { index: action, n_actions: self.n_actions });
        }
        let mut row: Vec<f64> = self.row(state).iter().map(|p| -p).collect();
        row[action] += 1.0;
        Ok(row)
    }

    /// Shannon entropy of the action distribution at `state`.
    pub fn entropy(&self, state: usize) -> f64 {
        -self.row(state).iter().zip(self.log_row(state)).map(|(p, lp)| p * lp).sum::<f64>()
    }

    /// Smallest action probability over all states.
    pub fn min_prob(&self) -> f64 {
        self.probs.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn closed_form_probabilities() {
        let p = TabularPolicy::uniform(2, 3);
        for q in p.probs(1).unwrap() {
            assert_relative_eq!(*q, 1.0 / 3.0, epsilon = 1e-15);
        }
        let p = TabularPolicy::from_logits(1, 2, vec![4.2, 4.2]).unwrap();
        assert_eq!(p.probs(0).unwrap(), &[0.5, 0.5]);
        let p = TabularPolicy::from_logits(1, 2, vec![2f64.ln(), 0.0]).unwrap();
        assert_relative_eq!(p.probs(0).unwrap()[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(p.probs(0).unwrap()[1], 1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn out_of_range_state_is_an_error() {
        let p = TabularPolicy::uniform(2, 3);
        assert!(matches!(p.probs(2), Err(Error::StateOutOfRange { .. })));
        assert!(p.score(0, 3).is_err());
        assert!(p.score(5, 0).is_err());
    }

    #[test]
    fn score_of_uniform_policy() {
        let p = TabularPolicy::uniform(1, 3);
        let row = p.score(0, 0).unwrap();
        assert_relative_eq!(row[0], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(row[1], -1.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(row[2], -1.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn saturated_score_vanishes() {
        let p = TabularPolicy::from_logits(1, 3, vec![60.0, 0.0, 0.0]).unwrap();
        let row = p.score(0, 0).unwrap();
        assert!(row.iter().all(|v| v.abs() < 1e-25));
    }

    #[test]
    fn extreme_logits_stay_finite() {
        let p = TabularPolicy::from_logits(1, 2, vec![1e6, -1e6]).unwrap();
        assert_eq!(p.probs(0).unwrap(), &[1.0, 0.0]);
        assert!(p.log_row(0).iter().all(|l| l.is_finite()));
    }

    proptest! {
        #[test]
        fn probabilities_form_a_distribution(logits in proptest::collection::vec(-20.0f64..20.0, 12)) {
            let p = TabularPolicy::from_logits(3, 4, logits).unwrap();
            for s in 0..3 {
                let row = p.probs(s).unwrap();
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|q| *q > 0.0));
            }
        }

        #[test]
        fn shift_invariance(logits in proptest::collection::vec(-5.0f64..5.0, 4), c in -50.0f64..50.0) {
            let p = TabularPolicy::from_logits(1, 4, logits.clone()).unwrap();
            let q = TabularPolicy::from_logits(1, 4, logits.iter().map(|l| l + c).collect()).unwrap();
            for (a, b) in p.row(0).iter().zip(q.row(0)) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn score_matches_finite_differences(logits in proptest::collection::vec(-3.0f64..3.0, 3), action in 0usize..3) {
            let p = TabularPolicy::from_logits(1, 3, logits.clone()).unwrap();
            let score = p.score(0, action).unwrap();
            prop_assert!(score.iter().sum::<f64>().abs() < 1e-12);
            let h = 1e-6;
            for j in 0..3 {
                let mut up = logits.clone();
                up[j] += h;
                let mut dn = logits.clone();
                dn[j] -= h;
                let fd = (TabularPolicy::from_logits(1, 3, up).unwrap().log_row(0)[action]
                    - TabularPolicy::from_logits(1, 3, dn).unwrap().log_row(0)[action]) / (2.0 * h);
                prop_assert!((fd - score[j]).abs() <= 1e-6 * score[j].abs().max(1e-3));
            }
        }
    }
}
