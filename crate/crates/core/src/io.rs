//! JSON file formats for mdps, features, policies and modifications, and the
//! line-delimited dataset format. Stage keys are 1-based; state keys are the
//! global state ids.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::invalid;
use crate::features::FeatureMap;
use crate::mdp::{Dataset, Policy, RewardKind, StagedMdp, Step, Trajectory};
use crate::scalar::positive;
use crate::skipping::Modification;
use crate::{Real, Result};

type Keyed<V> = BTreeMap<String, V>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpFile {
    pub horizon: usize,
    pub stages: Vec<Vec<usize>>,
    pub actions: usize,
    pub transitions: Keyed<Keyed<Keyed<Vec<f64>>>>,
    pub rewards: Keyed<Keyed<Keyed<f64>>>,
    #[serde(default)]
    pub reward_kind: RewardKind,
}

fn key(x: usize) -> String {
    x.to_string()
}

fn lookup<'a, V>(map: &'a Keyed<V>, k: usize, what: &str) -> Result<&'a V> {
    map.get(&key(k))
        .ok_or_else(|| invalid(format!("missing {what} entry `{k}`")))
}

fn to_t<T: Real>(xs: &[f64]) -> Vec<T> {
    xs.iter().map(|x| T::lit(*x)).collect()
}

fn to_f64<T: Real>(xs: impl IntoIterator<Item = T>) -> Vec<f64> {
    xs.into_iter().map(|x| x.as_f64()).collect()
}

impl MdpFile {
    pub fn from_mdp<T: Real>(mdp: &StagedMdp<T>) -> Self {
        let h = mdp.horizon();
        let mut transitions = Keyed::new();
        let mut rewards = Keyed::new();
        for k in 0..h {
            let mut tk = Keyed::new();
            let mut rk = Keyed::new();
            for (i, id) in mdp.stages()[k].iter().enumerate() {
                let mut ts = Keyed::new();
                let mut rs = Keyed::new();
                for a in 0..mdp.actions() {
                    ts.insert(key(a), to_f64(mdp.transition(k, i, a).iter().copied()));
                    rs.insert(key(a), mdp.reward(k, i, a).as_f64());
                }
                tk.insert(key(*id), ts);
                rk.insert(key(*id), rs);
            }
            transitions.insert(key(k + 1), tk);
            rewards.insert(key(k + 1), rk);
        }
        Self {
            horizon: h,
            stages: mdp.stages().to_vec(),
            actions: mdp.actions(),
            transitions,
            rewards,
            reward_kind: mdp.reward_kind(),
        }
    }

    pub fn to_mdp<T: Real>(&self) -> Result<StagedMdp<T>> {
        if self.stages.len() != self.horizon + 1 {
            return Err(invalid("stage list does not match the horizon"));
        }
        let mut transitions = Vec::with_capacity(self.horizon);
        let mut rewards = Vec::with_capacity(self.horizon);
        for k in 0..self.horizon {
            let tk = lookup(&self.transitions, k + 1, "transition stage")?;
            let rk = lookup(&self.rewards, k + 1, "reward stage")?;
            let mut ts = Vec::new();
            let mut rs = Vec::new();
            for id in &self.stages[k] {
                let t = lookup(tk, *id, "transition state")?;
                let r = lookup(rk, *id, "reward state")?;
                let mut trow = Vec::with_capacity(self.actions);
                let mut rrow = Vec::with_capacity(self.actions);
                for a in 0..self.actions {
                    trow.push(to_t(lookup(t, a, "transition action")?));
                    rrow.push(T::lit(*lookup(r, a, "reward action")?));
                }
                ts.push(trow);
                rs.push(rrow);
            }
            transitions.push(ts);
            rewards.push(rs);
        }
        StagedMdp::new(
            self.horizon,
            self.stages.clone(),
            self.actions,
            transitions,
            rewards,
            self.reward_kind,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureFile {
    pub dim: usize,
    #[serde(rename = "L1")]
    pub l1: f64,
    pub phi: Keyed<Keyed<Keyed<Vec<f64>>>>,
}

impl FeatureFile {
    pub fn from_features<T: Real>(mdp: &StagedMdp<T>, features: &FeatureMap<T>) -> Self {
        let mut phi = Keyed::new();
        for k in 0..=mdp.horizon() {
            let mut pk = Keyed::new();
            for (i, id) in mdp.stages()[k].iter().enumerate() {
                let block = features.state_matrix(k, i);
                let ps = (0..mdp.actions())
                    .map(|a| (key(a), to_f64(block.column(a).iter().copied())))
                    .collect();
                pk.insert(key(*id), ps);
            }
            phi.insert(key(k + 1), pk);
        }
        Self {
            dim: features.dim(),
            l1: features.l1().as_f64(),
            phi,
        }
    }

    pub fn to_features<T: Real>(&self, mdp: &StagedMdp<T>) -> Result<FeatureMap<T>> {
        let mut vectors = Vec::with_capacity(mdp.horizon() + 1);
        for k in 0..=mdp.horizon() {
            let pk = lookup(&self.phi, k + 1, "feature stage")?;
            let mut stage = Vec::new();
            for id in &mdp.stages()[k] {
                let ps = lookup(pk, *id, "feature state")?;
                let row = (0..mdp.actions())
                    .map(|a| lookup(ps, a, "feature action").map(|v| to_t(v)))
                    .collect::<Result<Vec<_>>>()?;
                stage.push(row);
            }
            vectors.push(stage);
        }
        let blocks = vectors
            .into_iter()
            .map(|stage| {
                stage
                    .into_iter()
                    .map(|row: Vec<Vec<T>>| {
                        nalgebra::DMatrix::from_fn(self.dim, row.len(), |r, c| {
                            row[c].get(r).copied().unwrap_or_else(T::zero)
                        })
                    })
                    .collect()
            })
            .collect();
        for stage in self.phi.values() {
            for ps in stage.values() {
                if ps.values().any(|v| v.len() != self.dim) {
                    return Err(invalid("feature vector length differs from dim"));
                }
            }
        }
        FeatureMap::new(mdp, self.dim, T::lit(self.l1), blocks)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub probs: Keyed<Keyed<Vec<f64>>>,
}

impl PolicyFile {
    pub fn from_policy<T: Real>(mdp: &StagedMdp<T>, pi: &Policy<T>) -> Self {
        let probs = (0..=mdp.horizon())
            .map(|k| {
                let stage = mdp.stages()[k]
                    .iter()
                    .enumerate()
                    .map(|(i, id)| (key(*id), to_f64(pi.row(k, i).iter().copied())))
                    .collect();
                (key(k + 1), stage)
            })
            .collect();
        Self { probs }
    }

    pub fn to_policy<T: Real>(&self, mdp: &StagedMdp<T>) -> Result<Policy<T>> {
        let mut tables = Vec::with_capacity(mdp.horizon() + 1);
        for k in 0..=mdp.horizon() {
            let Some(pk) = self.probs.get(&key(k + 1)) else {
                if k == mdp.horizon() {
                    break;
                }
                return Err(invalid(format!("missing policy stage `{}`", k + 1)));
            };
            let stage = mdp.stages()[k]
                .iter()
                .map(|id| lookup(pk, *id, "policy state").map(|r| to_t(r)))
                .collect::<Result<Vec<_>>>()?;
            tables.push(stage);
        }
        Policy::new(mdp, tables)
    }
}

/// `sha256` hex digest of the canonical JSON of a policy.
pub fn policy_digest<T: Real>(mdp: &StagedMdp<T>, pi: &Policy<T>) -> String {
    let json = serde_json::to_string(&PolicyFile::from_policy(mdp, pi)).expect("policy serializes");
    hex::encode(Sha256::digest(json.as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModificationFile {
    pub alpha: f64,
    pub per_stage: Vec<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub no_skip: bool,
}

impl ModificationFile {
    pub fn from_modification<T: Real>(g: &Modification<T>) -> Self {
        Self {
            alpha: g.alpha.as_f64(),
            per_stage: g
                .per_stage
                .iter()
                .map(|pts| pts.iter().map(|p| to_f64(p.iter().copied())).collect())
                .collect(),
            no_skip: g.no_skip,
        }
    }

    pub fn to_modification<T: Real>(&self) -> Result<Modification<T>> {
        let alpha = T::lit(self.alpha);
        if self.no_skip {
            let mut g = Modification::no_skip(alpha, self.per_stage.len());
            if !positive(alpha) {
                return Err(invalid("alpha must be positive"));
            }
            g.per_stage = self
                .per_stage
                .iter()
                .map(|s| s.iter().map(|p| DVector::from_vec(to_t(p))).collect())
                .collect();
            return Ok(g);
        }
        Modification::new(
            alpha,
            self.per_stage
                .iter()
                .map(|s| s.iter().map(|p| DVector::from_vec(to_t(p))).collect())
                .collect(),
        )
    }
}

pub fn to_json<S: Serialize>(value: &S) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)?)
}

pub fn from_json<S: for<'de> Deserialize<'de>>(text: &str) -> Result<S> {
    Ok(serde_json::from_str(text)?)
}

pub fn mdp_to_json<T: Real>(mdp: &StagedMdp<T>) -> Result<String> {
    to_json(&MdpFile::from_mdp(mdp))
}

pub fn mdp_from_json<T: Real>(text: &str) -> Result<StagedMdp<T>> {
    from_json::<MdpFile>(text)?.to_mdp()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub n: usize,
    pub seed: u64,
    pub behavior_policy_digest: String,
}

pub fn write_dataset<T: Real, W: Write>(
    mdp: &StagedMdp<T>,
    data: &Dataset<T>,
    mut out: W,
) -> Result<()> {
    let header = DatasetHeader {
        n: data.len(),
        seed: data.seed,
        behavior_policy_digest: policy_digest(mdp, &data.behavior),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for traj in &data.trajectories {
        let steps: Vec<(usize, usize, f64)> = traj
            .steps
            .iter()
            .map(|s| (s.state, s.action, s.reward.as_f64()))
            .collect();
        writeln!(out, "{}", serde_json::to_string(&steps)?)?;
    }
    Ok(())
}

/// Reads a dataset; the digest in the header must match `behavior`.
pub fn read_dataset<T: Real, R: BufRead>(
    mdp: &StagedMdp<T>,
    behavior: &Policy<T>,
    input: R,
) -> Result<Dataset<T>> {
    let mut lines = input.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| invalid("dataset file is empty"))??;
    let header: DatasetHeader = serde_json::from_str(&header_line)?;
    let digest = policy_digest(mdp, behavior);
    if header.behavior_policy_digest != digest {
        return Err(invalid(
            "behavior policy digest does not match the dataset header",
        ));
    }
    let mut trajectories = Vec::with_capacity(header.n);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let steps: Vec<(usize, usize, f64)> = serde_json::from_str(&line)?;
        if steps.len() != mdp.horizon() + 1 {
            return Err(invalid("trajectory length does not match the horizon"));
        }
        for (k, (s, a, r)) in steps.iter().enumerate() {
            match mdp.locate(*s) {
                Some((sk, _)) if sk == k => {}
                _ => return Err(invalid(format!("state {s} is not in stage {}", k + 1))),
            }
            if *a >= mdp.actions() || !r.is_finite() {
                return Err(invalid("bad action or reward in dataset"));
            }
        }
        trajectories.push(Trajectory {
            steps: steps
                .into_iter()
                .map(|(state, action, reward)| Step {
                    state,
                    action,
                    reward: T::lit(reward),
                })
                .collect(),
        });
    }
    if trajectories.len() != header.n {
        return Err(invalid(format!(
            "header announces {} trajectories, found {}",
            header.n,
            trajectories.len()
        )));
    }
    Dataset::new(trajectories, behavior.clone(), header.seed)
}
