//! Staged finite-horizon MDPs, memoryless policies, exact dynamic programming,
//! trajectory sampling, occupancy measures and concentrability.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::{Error, Real, Result};

/// Deterministic-policy enumerations larger than this are refused.
pub const POLICY_ENUMERATION_CAP: f64 = 1e7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    Deterministic,
    Bernoulli,
}

/// Tables indexed `[stage][local state][action]`.
pub type StageTables<T> = Vec<Vec<Vec<T>>>;

#[derive(Clone, Debug)]
pub struct StagedMdp<T: Real> {
    horizon: usize,
    stages: Vec<Vec<usize>>,
    actions: usize,
    transitions: Vec<Vec<Vec<Vec<T>>>>,
    rewards: StageTables<T>,
    reward_kind: RewardKind,
    index: HashMap<usize, (usize, usize)>,
}

impl<T: Real> StagedMdp<T> {
    /// `transitions[k][i][a]` is a distribution over the states of stage `k + 1`
    /// (in the order of `stages[k + 1]`); `rewards[k][i][a]` are means for `k < horizon`.
    pub fn new(
        horizon: usize,
        stages: Vec<Vec<usize>>,
        actions: usize,
        transitions: Vec<Vec<Vec<Vec<T>>>>,
        mut rewards: StageTables<T>,
        reward_kind: RewardKind,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(invalid("horizon must be positive"));
        }
        if actions == 0 {
            return Err(invalid("action count must be positive"));
        }
        if stages.len() != horizon + 1 {
            return Err(invalid(format!(
                "expected {} stages, got {}",
                horizon + 1,
                stages.len()
            )));
        }
        if stages[0].len() != 1 || stages[horizon].len() != 1 {
            return Err(invalid("first and last stage must hold exactly one state"));
        }
        let mut index = HashMap::new();
        for (k, ids) in stages.iter().enumerate() {
            if ids.is_empty() {
                return Err(invalid(format!("stage {} is empty", k + 1)));
            }
            for (i, id) in ids.iter().enumerate() {
                if index.insert(*id, (k, i)).is_some() {
                    return Err(invalid(format!("state id {id} appears twice")));
                }
            }
        }
        if transitions.len() != horizon {
            return Err(invalid("transitions must cover every non-terminal stage"));
        }
        let tol = T::tol(1e-12);
        for (k, stage) in transitions.iter().enumerate() {
            if stage.len() != stages[k].len() {
                return Err(invalid(format!(
                    "transition table of stage {} has wrong size",
                    k + 1
                )));
            }
            for row in stage {
                if row.len() != actions {
                    return Err(invalid("transition row has wrong action count"));
                }
                for probs in row {
                    if probs.len() != stages[k + 1].len() {
                        return Err(invalid(format!(
                            "transition from stage {} must cover stage {}",
                            k + 1,
                            k + 2
                        )));
                    }
                    if probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
                        return Err(invalid("negative or non-finite transition probability"));
                    }
                    let total = probs.iter().fold(T::zero(), |a, p| a + *p);
                    if (total - T::one()).abs() > tol {
                        return Err(invalid(format!(
                            "transition row at stage {} sums to {}",
                            k + 1,
                            total
                        )));
                    }
                }
            }
        }
        if rewards.len() == horizon + 1 {
            let last = rewards.pop().unwrap();
            if last.iter().flatten().any(|r| *r != T::zero()) {
                return Err(invalid("terminal rewards must be zero"));
            }
        }
        if rewards.len() != horizon {
            return Err(invalid("rewards must cover every non-terminal stage"));
        }
        for (k, stage) in rewards.iter().enumerate() {
            if stage.len() != stages[k].len() || stage.iter().any(|r| r.len() != actions) {
                return Err(invalid(format!(
                    "reward table of stage {} has wrong shape",
                    k + 1
                )));
            }
            if stage
                .iter()
                .flatten()
                .any(|r| !r.is_finite() || *r < T::zero() || *r > T::one())
            {
                return Err(invalid("reward means must lie in [0, 1]"));
            }
        }
        rewards.push(vec![vec![T::zero(); actions]]);
        Ok(Self {
            horizon,
            stages,
            actions,
            transitions,
            rewards,
            reward_kind,
            index,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn stages(&self) -> &[Vec<usize>] {
        &self.stages
    }

    pub fn stage_len(&self, k: usize) -> usize {
        self.stages[k].len()
    }

    pub fn state_id(&self, k: usize, i: usize) -> usize {
        self.stages[k][i]
    }

    /// `(stage, local index)` of a state id.
    pub fn locate(&self, id: usize) -> Option<(usize, usize)> {
        self.index.get(&id).copied()
    }

    pub fn transition(&self, k: usize, i: usize, a: usize) -> &[T] {
        &self.transitions[k][i][a]
    }

    pub fn reward(&self, k: usize, i: usize, a: usize) -> T {
        self.rewards[k][i][a]
    }

    /// Reward means for all stages including the (zero) terminal stage.
    pub fn rewards(&self) -> &StageTables<T> {
        &self.rewards
    }

    pub fn transitions(&self) -> &[Vec<Vec<Vec<T>>>] {
        &self.transitions
    }

    pub fn reward_kind(&self) -> RewardKind {
        self.reward_kind
    }

    /// Same dynamics with different reward means.
    pub fn with_rewards(&self, rewards: StageTables<T>) -> Result<Self> {
        Self::new(
            self.horizon,
            self.stages.clone(),
            self.actions,
            self.transitions.clone(),
            rewards,
            self.reward_kind,
        )
    }

    /// `A^{number of non-terminal states}`.
    pub fn deterministic_policy_count(&self) -> f64 {
        let states: usize = self.stages[..self.horizon].iter().map(Vec::len).sum();
        (self.actions as f64).powi(states as i32)
    }

    /// Sum over next states of `P(s'|s,a) f(s')`.
    pub fn expect_next(&self, k: usize, i: usize, a: usize, next: &[T]) -> T {
        self.transitions[k][i][a]
            .iter()
            .zip(next)
            .fold(T::zero(), |acc, (p, v)| acc + *p * *v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Policy<T: Real> {
    probs: StageTables<T>,
}

impl<T: Real> Policy<T> {
    /// Rows for every stage; the terminal row may be omitted, in which case it
    /// defaults to the first action.
    pub fn new(mdp: &StagedMdp<T>, mut probs: StageTables<T>) -> Result<Self> {
        let h = mdp.horizon();
        if probs.len() == h {
            let mut last = vec![T::zero(); mdp.actions()];
            last[0] = T::one();
            probs.push(vec![last]);
        }
        if probs.len() != h + 1 {
            return Err(invalid(format!(
                "policy has {} stages, mdp has {}",
                probs.len(),
                h + 1
            )));
        }
        let tol = T::tol(1e-12);
        for (k, stage) in probs.iter().enumerate() {
            if stage.len() != mdp.stage_len(k) {
                return Err(invalid(format!(
                    "policy stage {} has wrong state count",
                    k + 1
                )));
            }
            for row in stage {
                if row.len() != mdp.actions() {
                    return Err(invalid("policy row has wrong action count"));
                }
                if row.iter().any(|p| !p.is_finite() || *p < T::zero()) {
                    return Err(invalid("negative or non-finite action probability"));
                }
                let total = row.iter().fold(T::zero(), |a, p| a + *p);
                if (total - T::one()).abs() > tol {
                    return Err(invalid(format!("policy row sums to {total}")));
                }
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(mdp: &StagedMdp<T>) -> Self {
        let p = T::one() / T::lit(mdp.actions() as f64);
        let probs = (0..=mdp.horizon())
            .map(|k| vec![vec![p; mdp.actions()]; mdp.stage_len(k)])
            .collect();
        Self { probs }
    }

    /// `choices[k][i]` is the action at local state `i` of stage `k`; the terminal
    /// stage may be omitted.
    pub fn deterministic(mdp: &StagedMdp<T>, choices: &[Vec<usize>]) -> Result<Self> {
        let probs = choices
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|&a| {
                        let mut row = vec![T::zero(); mdp.actions()];
                        if a < row.len() {
                            row[a] = T::one();
                        }
                        row
                    })
                    .collect()
            })
            .collect();
        Self::new(mdp, probs)
    }

    /// Plays `a` everywhere.
    pub fn constant(mdp: &StagedMdp<T>, a: usize) -> Result<Self> {
        let choices: Vec<Vec<usize>> = (0..=mdp.horizon())
            .map(|k| vec![a; mdp.stage_len(k)])
            .collect();
        Self::deterministic(mdp, &choices)
    }

    pub fn random_deterministic<R: Rng>(mdp: &StagedMdp<T>, rng: &mut R) -> Self {
        let choices: Vec<Vec<usize>> = (0..mdp.horizon())
            .map(|k| {
                (0..mdp.stage_len(k))
                    .map(|_| rng.random_range(0..mdp.actions()))
                    .collect()
            })
            .collect();
        Self::deterministic(mdp, &choices).expect("valid random choices")
    }

    /// Rows drawn uniformly from the simplex.
    pub fn random_stochastic<R: Rng>(mdp: &StagedMdp<T>, rng: &mut R) -> Self {
        let probs = (0..=mdp.horizon())
            .map(|k| {
                (0..mdp.stage_len(k))
                    .map(|_| random_simplex(mdp.actions(), rng))
                    .collect()
            })
            .collect();
        Self { probs }
    }

    pub fn row(&self, k: usize, i: usize) -> &[T] {
        &self.probs[k][i]
    }

    pub fn prob(&self, k: usize, i: usize, a: usize) -> T {
        self.probs[k][i][a]
    }

    pub fn tables(&self) -> &StageTables<T> {
        &self.probs
    }

    pub fn is_deterministic(&self) -> bool {
        self.probs
            .iter()
            .flatten()
            .all(|row| row.iter().any(|p| *p == T::one()))
    }

    /// Action choices when the policy is deterministic.
    pub fn choices(&self) -> Option<Vec<Vec<usize>>> {
        self.probs
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|row| row.iter().position(|p| *p == T::one()))
                    .collect::<Option<Vec<_>>>()
            })
            .collect()
    }

    pub(crate) fn from_tables_unchecked(probs: StageTables<T>) -> Self {
        Self { probs }
    }

    pub(crate) fn check(&self, mdp: &StagedMdp<T>) -> Result<()> {
        let ok = self.probs.len() == mdp.horizon() + 1
            && self.probs.iter().enumerate().all(|(k, s)| {
                s.len() == mdp.stage_len(k) && s.iter().all(|r| r.len() == mdp.actions())
            });
        if ok {
            Ok(())
        } else {
            Err(invalid("policy stages do not match the mdp"))
        }
    }
}

pub(crate) fn random_simplex<T: Real, R: Rng>(n: usize, rng: &mut R) -> Vec<T> {
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = raw.iter().sum();
    let mut out: Vec<T> = raw.iter().map(|x| T::lit(x / total)).collect();
    let s = out.iter().fold(T::zero(), |a, p| a + *p);
    out[0] += T::one() - s;
    if out[0] < T::zero() {
        out[0] = T::zero();
    }
    out
}

/// Action values and state values of a policy, `[stage][state][action]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QTables<T: Real> {
    pub q: StageTables<T>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> QTables<T> {
    pub fn start_value(&self) -> T {
        self.v[0][0]
    }
}

pub fn backward_q<T: Real>(mdp: &StagedMdp<T>, pi: &Policy<T>) -> Result<QTables<T>> {
    pi.check(mdp)?;
    let h = mdp.horizon();
    let a_count = mdp.actions();
    let mut q = vec![vec![vec![T::zero(); a_count]; 1]; h + 1];
    let mut v = vec![vec![T::zero(); 1]; h + 1];
    for k in (0..h).rev() {
        let stage_q: Vec<Vec<T>> = (0..mdp.stage_len(k))
            .map(|i| {
                (0..a_count)
                    .map(|a| mdp.reward(k, i, a) + mdp.expect_next(k, i, a, &v[k + 1]))
                    .collect()
            })
            .collect();
        v[k] = stage_q
            .iter()
            .enumerate()
            .map(|(i, row)| dot(pi.row(k, i), row))
            .collect();
        q[k] = stage_q;
    }
    Ok(QTables { q, v })
}

/// Optimal values and the greedy optimal policy (ties to the lowest action).
pub fn optimal_q<T: Real>(mdp: &StagedMdp<T>) -> (QTables<T>, Policy<T>) {
    let h = mdp.horizon();
    let a_count = mdp.actions();
    let mut q = vec![vec![vec![T::zero(); a_count]; 1]; h + 1];
    let mut v = vec![vec![T::zero(); 1]; h + 1];
    for k in (0..h).rev() {
        q[k] = (0..mdp.stage_len(k))
            .map(|i| {
                (0..a_count)
                    .map(|a| mdp.reward(k, i, a) + mdp.expect_next(k, i, a, &v[k + 1]))
                    .collect()
            })
            .collect();
        v[k] = q[k].iter().map(|row| row[argmax(row)]).collect();
    }
    let policy = greedy_policy(mdp, &q);
    (QTables { q, v }, policy)
}

/// Greedy policy of action-value tables on the non-terminal stages.
pub fn greedy_policy<T: Real>(mdp: &StagedMdp<T>, q: &[Vec<Vec<T>>]) -> Policy<T> {
    let choices: Vec<Vec<usize>> = (0..mdp.horizon())
        .map(|k| q[k].iter().map(|row| argmax(row)).collect())
        .collect();
    Policy::deterministic(mdp, &choices).expect("greedy choices are valid")
}

/// First index of the maximum.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (a, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = a;
        }
    }
    best
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Step<T> {
    pub state: usize,
    pub action: usize,
    pub reward: T,
}

/// One episode, steps for stages `0..=horizon`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T: Real> {
    pub steps: Vec<Step<T>>,
}

/// Stream for trajectory `index` under `seed`; independent of call order.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn sample_index<T: Real, R: Rng>(probs: &[T], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, p) in probs.iter().enumerate() {
        let p = p.as_f64();
        if p > 0.0 {
            last = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    last
}

pub fn sample_trajectory<T: Real>(
    mdp: &StagedMdp<T>,
    pi: &Policy<T>,
    seed: u64,
    index: u64,
) -> Trajectory<T> {
    let mut rng = trajectory_rng(seed, index);
    let h = mdp.horizon();
    let mut steps = Vec::with_capacity(h + 1);
    let mut i = 0;
    for k in 0..=h {
        let a = sample_index(pi.row(k, i), &mut rng);
        let mean = mdp.reward(k, i, a);
        let reward = match mdp.reward_kind() {
            RewardKind::Deterministic => mean,
            RewardKind::Bernoulli => {
                if k < h && rng.random::<f64>() < mean.as_f64() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        };
        steps.push(Step {
            state: mdp.state_id(k, i),
            action: a,
            reward,
        });
        if k < h {
            i = sample_index(mdp.transition(k, i, a), &mut rng);
        }
    }
    Trajectory { steps }
}

#[derive(Clone, Debug)]
pub struct Dataset<T: Real> {
    pub trajectories: Vec<Trajectory<T>>,
    pub behavior: Policy<T>,
    pub seed: u64,
}

impl<T: Real> Dataset<T> {
    pub fn new(trajectories: Vec<Trajectory<T>>, behavior: Policy<T>, seed: u64) -> Result<Self> {
        let Some(first) = trajectories.first() else {
            return Err(invalid("a dataset needs at least one trajectory"));
        };
        let len = first.steps.len();
        if trajectories.iter().any(|t| t.steps.len() != len) {
            return Err(invalid("trajectories have different horizons"));
        }
        Ok(Self {
            trajectories,
            behavior,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// `n` trajectories of `pi`; trajectory `j` uses stream `(seed, j)`.
pub fn sample_dataset<T: Real>(
    mdp: &StagedMdp<T>,
    pi: &Policy<T>,
    n: usize,
    seed: u64,
) -> Result<Dataset<T>> {
    pi.check(mdp)?;
    let trajectories: Vec<_> = (0..n as u64)
        .into_par_iter()
        .map(|j| sample_trajectory(mdp, pi, seed, j))
        .collect();
    Dataset::new(trajectories, pi.clone(), seed)
}

/// State-action marginals `[stage][state][action]` of a policy.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyMeasure<T: Real> {
    pub stages: StageTables<T>,
}

impl<T: Real> OccupancyMeasure<T> {
    pub fn state_marginal(&self, k: usize) -> Vec<T> {
        self.stages[k]
            .iter()
            .map(|row| row.iter().fold(T::zero(), |a, p| a + *p))
            .collect()
    }

    /// `E_{(S,A)~stage k} f(S, A)` over local indices.
    pub fn expectation(&self, k: usize, mut f: impl FnMut(usize, usize) -> T) -> T {
        let mut acc = T::zero();
        for (i, row) in self.stages[k].iter().enumerate() {
            for (a, p) in row.iter().enumerate() {
                if *p != T::zero() {
                    acc += *p * f(i, a);
                }
            }
        }
        acc
    }
}

pub fn occupancy<T: Real>(mdp: &StagedMdp<T>, pi: &Policy<T>) -> Result<OccupancyMeasure<T>> {
    pi.check(mdp)?;
    let h = mdp.horizon();
    let mut stages = Vec::with_capacity(h + 1);
    let mut reach = vec![T::one()];
    for k in 0..=h {
        let table: Vec<Vec<T>> = reach
            .iter()
            .enumerate()
            .map(|(i, r)| pi.row(k, i).iter().map(|p| *r * *p).collect())
            .collect();
        if k < h {
            let mut next = vec![T::zero(); mdp.stage_len(k + 1)];
            for (i, row) in table.iter().enumerate() {
                for (a, m) in row.iter().enumerate() {
                    if *m == T::zero() {
                        continue;
                    }
                    for (j, p) in mdp.transition(k, i, a).iter().enumerate() {
                        next[j] += *m * *p;
                    }
                }
            }
            reach = next;
        }
        stages.push(table);
    }
    Ok(OccupancyMeasure { stages })
}

/// Odometer over all action assignments to the states of `stages[from..to]`.
/// Calls `f` with the per-stage choices and the index of the most downstream
/// stage whose digits changed since the previous call (relative to `from`).
pub(crate) fn enumerate_choices(
    sizes: &[usize],
    actions: usize,
    mut f: impl FnMut(&[Vec<usize>], usize),
) {
    let mut choices: Vec<Vec<usize>> = sizes.iter().map(|s| vec![0; *s]).collect();
    let last = sizes.len().saturating_sub(1);
    f(&choices, last);
    if actions <= 1 {
        return;
    }
    loop {
        let mut changed = None;
        'outer: for (u, stage) in choices.iter_mut().enumerate() {
            for digit in stage.iter_mut() {
                *digit += 1;
                if *digit < actions {
                    changed = Some(u);
                    break 'outer;
                }
                *digit = 0;
            }
        }
        match changed {
            Some(u) => f(&choices, u),
            None => return,
        }
    }
}

pub(crate) fn check_enumeration(count: f64) -> Result<()> {
    if count > POLICY_ENUMERATION_CAP {
        Err(Error::TooManyPolicies {
            count,
            cap: POLICY_ENUMERATION_CAP,
        })
    } else {
        Ok(())
    }
}

/// Calls `f` on every deterministic policy of the mdp.
pub fn for_each_deterministic_policy<T: Real>(
    mdp: &StagedMdp<T>,
    mut f: impl FnMut(&Policy<T>),
) -> Result<()> {
    check_enumeration(mdp.deterministic_policy_count())?;
    let sizes: Vec<usize> = (0..mdp.horizon()).map(|k| mdp.stage_len(k)).collect();
    enumerate_choices(&sizes, mdp.actions(), |choices, _| {
        let pi = Policy::deterministic(mdp, choices).expect("valid choices");
        f(&pi);
    });
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Concentrability<T> {
    Finite(T),
    /// Some policy reaches a pair the behavior policy never visits.
    Infinite,
}

impl<T: Real> Concentrability<T> {
    pub fn value(&self) -> Option<T> {
        match self {
            Concentrability::Finite(c) => Some(*c),
            Concentrability::Infinite => None,
        }
    }
}

/// Max over deterministic policies, stages and pairs of `nu/mu`.
pub fn concentrability<T: Real>(
    mdp: &StagedMdp<T>,
    behavior: &Policy<T>,
) -> Result<Concentrability<T>> {
    let mu = occupancy(mdp, behavior)?;
    let mut best = T::one();
    let mut infinite = false;
    for_each_deterministic_policy(mdp, |pi| {
        if infinite {
            return;
        }
        let nu = occupancy(mdp, pi).expect("policy matches mdp");
        for (k, stage) in nu.stages.iter().enumerate().take(mdp.horizon()) {
            for (i, row) in stage.iter().enumerate() {
                for (a, n) in row.iter().enumerate() {
                    if *n <= T::zero() {
                        continue;
                    }
                    let m = mu.stages[k][i][a];
                    if m <= T::zero() {
                        infinite = true;
                        return;
                    }
                    best = best.max(*n / m);
                }
            }
        }
    })?;
    Ok(if infinite {
        Concentrability::Infinite
    } else {
        Concentrability::Finite(best)
    })
}

/// `|v^pi(s1) - v^bar(s1) - sum_h E_{nu^pi_h}[q^bar - v^bar]|`.
pub fn performance_difference<T: Real>(
    mdp: &StagedMdp<T>,
    pi: &Policy<T>,
    pi_bar: &Policy<T>,
) -> Result<T> {
    let qp = backward_q(mdp, pi)?;
    let qb = backward_q(mdp, pi_bar)?;
    let nu = occupancy(mdp, pi)?;
    let mut rhs = T::zero();
    for k in 0..mdp.horizon() {
        rhs += nu.expectation(k, |i, a| qb.q[k][i][a] - qb.v[k][i]);
    }
    Ok((qp.start_value() - qb.start_value() - rhs).abs())
}
