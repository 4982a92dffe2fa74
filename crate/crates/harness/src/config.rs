//! Run configuration: one JSON document plus command-line overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use skippy_core::learners::{FamilySpec, LearnerConfig};
use skippy_core::mdp::{optimal_q, Policy, StagedMdp};
use skippy_core::regression::{Multipliers, Objective};
use skippy_core::{Error, Result};

use crate::instances::InstanceSpec;

/// A policy named in a config: `uniform`, `optimal`, `constant:A` or `random:SEED`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicySpec {
    Uniform,
    Optimal,
    Constant(usize),
    Random(u64),
}

impl PolicySpec {
    pub fn build(&self, mdp: &StagedMdp<f64>) -> Result<Policy<f64>> {
        match self {
            PolicySpec::Uniform => Ok(Policy::uniform(mdp)),
            PolicySpec::Optimal => Ok(optimal_q(mdp).1),
            PolicySpec::Constant(a) => Policy::constant(mdp, *a),
            PolicySpec::Random(seed) => Ok(Policy::random_deterministic(
                mdp,
                &mut ChaCha8Rng::seed_from_u64(*seed),
            )),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidInput(format!("unknown policy `{s}`"));
        match s.split_once(':') {
            None if s == "uniform" => Ok(PolicySpec::Uniform),
            None if s == "optimal" => Ok(PolicySpec::Optimal),
            Some(("constant", a)) => a.parse().map(PolicySpec::Constant).map_err(|_| bad()),
            Some(("random", seed)) => seed.parse().map(PolicySpec::Random).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicySpec::Uniform => write!(f, "uniform"),
            PolicySpec::Optimal => write!(f, "optimal"),
            PolicySpec::Constant(a) => write!(f, "constant:{a}"),
            PolicySpec::Random(s) => write!(f, "random:{s}"),
        }
    }
}

fn as_string<S: Serializer, V: fmt::Display>(v: &V, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.collect_str(v)
}

fn from_string<'de, D: Deserializer<'de>, V: FromStr<Err = Error>>(
    d: D,
) -> std::result::Result<V, D::Error> {
    let text = String::deserialize(d)?;
    text.parse().map_err(serde::de::Error::custom)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerSettings {
    pub mode: Objective,
    pub eps: f64,
    pub delta: f64,
    pub alpha: Option<f64>,
    pub multipliers: Multipliers,
    #[serde(serialize_with = "as_string", deserialize_with = "from_string")]
    pub family: FamilySpec,
    #[serde(serialize_with = "as_string", deserialize_with = "from_string")]
    pub eval_policy: PolicySpec,
    /// Regression targets are exact skippy backups on the true mdp.
    pub exact_targets: bool,
}

impl Default for LearnerSettings {
    fn default() -> Self {
        Self {
            mode: Objective::Eval,
            eps: 0.1,
            delta: 0.1,
            alpha: None,
            multipliers: Multipliers::default(),
            family: FamilySpec::default(),
            eval_policy: PolicySpec::Constant(0),
            exact_targets: false,
        }
    }
}

impl LearnerSettings {
    pub fn learner_config(&self, l2: f64, concentrability: f64) -> LearnerConfig<f64> {
        LearnerConfig {
            eps: self.eps,
            delta: self.delta,
            alpha: self.alpha,
            multipliers: self.multipliers,
            l2,
            concentrability,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepPlan {
    /// Ascending sample sizes.
    pub n_grid: Vec<usize>,
    pub seeds: usize,
    pub first_seed: u64,
}

impl Default for SweepPlan {
    fn default() -> Self {
        Self {
            n_grid: vec![256, 512, 1024],
            seeds: 5,
            first_seed: 0,
        }
    }
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "the n grid must be strictly ascending".into(),
            ));
        }
        if self.n_grid.iter().any(|n| *n == 0 || *n > 1 << 14) {
            return Err(Error::Config("every n must lie in 1..=16384".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub instance: InstanceSpec,
    pub learner: LearnerSettings,
    pub n: usize,
    pub seed: u64,
    pub sweep: SweepPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            instance: InstanceSpec::default(),
            learner: LearnerSettings::default(),
            n: 1024,
            seed: 0,
            sweep: SweepPlan::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
