use std::path::{Path, PathBuf};

use panda::envs::{build_sentinel, build_synthetic, GridSpec, Instance, SyntheticSpec};
use panda::optimizers::{Method, PandaConfig, RunOptions};
use serde::{Deserialize, Deserializer, Serialize};

use crate::CliError;

/// Which environment an experiment runs on, with its construction parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    Synthetic(SyntheticSpec),
    Sentinel(GridSpec),
}

impl Default for EnvSpec {
    fn default() -> Self {
        EnvSpec::Synthetic(SyntheticSpec::default())
    }
}

impl EnvSpec {
    pub fn build(&self) -> panda::Result<Instance> {
        match self {
            EnvSpec::Synthetic(spec) => build_synthetic(spec),
            EnvSpec::Sentinel(spec) => build_sentinel(spec),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvSpec::Synthetic(_) => "synthetic",
            EnvSpec::Sentinel(_) => "sentinel",
        }
    }
}

/// An experiment: one environment, one or more optimizers, and the seeds to run each with.
///
/// `optimizer` is accepted as an alias of `optimizers` and may be a single name or a list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    #[serde(alias = "optimizer", deserialize_with = "one_or_many")]
    pub optimizers: Vec<Method>,
    pub panda: PandaConfig,
    /// Outer iterations between exact evaluations.
    pub eval_every: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Stop each run once this many environment transitions have been sampled.
    pub env_step_budget: Option<u64>,
    /// Record wall-clock time in the CSVs (makes them non-reproducible).
    pub timing: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            env: EnvSpec::default(),
            optimizers: vec![Method::Panda],
            panda: PandaConfig::default(),
            eval_every: 5,
            seeds: vec![0],
            out_dir: PathBuf::from("results"),
            env_step_budget: None,
            timing: false,
        }
    }
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Method>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(Method),
        Many(Vec<Method>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(m) => vec![m],
        OneOrMany::Many(v) => v,
    })
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.optimizers.is_empty() {
            return Err(CliError::Config("optimizer list is empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("seed list is empty".into()));
        }
        if self.eval_every == 0 {
            return Err(CliError::Config("eval_every must be at least 1".into()));
        }
        if self.env_step_budget == Some(0) {
            return Err(CliError::Config("env_step_budget must be positive".into()));
        }
        self.panda.validate().map_err(|e| CliError::Config(e.to_string()))?;
        match &self.env {
            EnvSpec::Synthetic(spec) if spec.n_states == 0 || spec.n_actions == 0 => {
                Err(CliError::Config("synthetic instance needs states and actions".into()))
            }
            EnvSpec::Sentinel(spec) => spec.validate().map_err(|e| CliError::Config(e.to_string())),
            _ => Ok(()),
        }
    }

    /// Distinct optimizers in listed order.
    pub fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for &m in &self.optimizers {
            if !out.contains(&m) {
                out.push(m);
            }
        }
        out
    }

    /// Distinct seeds in listed order.
    pub fn distinct_seeds(&self) -> Vec<u64> {
        let mut out: Vec<u64> = Vec::new();
        for &s in &self.seeds {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions { eval_every: self.eval_every, env_step_budget: self.env_step_budget, timing: self.timing }
    }
}
