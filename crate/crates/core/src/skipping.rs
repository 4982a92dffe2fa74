//! Skip weights, stopping distributions, skippy policies and the exact skippy
//! Bellman operators.

use nalgebra::DVector;

use crate::error::invalid;
use crate::features::{range_g, FeatureMap};
use crate::mdp::{argmax, dot, Policy, QTables, StageTables, StagedMdp, Trajectory};
use crate::scalar::positive;
use crate::{Real, Result};

/// One element `G` of the modification family: per-stage parameter points and a
/// skipping scale `alpha`. `no_skip` marks the sentinel whose weights are zero
/// everywhere (it behaves as if its range were unbounded).
#[derive(Clone, Debug, PartialEq)]
pub struct Modification<T: Real> {
    pub alpha: T,
    pub per_stage: Vec<Vec<DVector<T>>>,
    pub no_skip: bool,
}

impl<T: Real> Modification<T> {
    pub fn new(alpha: T, per_stage: Vec<Vec<DVector<T>>>) -> Result<Self> {
        if !positive(alpha) {
            return Err(invalid("alpha must be positive and finite"));
        }
        Ok(Self {
            alpha,
            per_stage,
            no_skip: false,
        })
    }

    pub fn no_skip(alpha: T, horizon: usize) -> Self {
        Self {
            alpha,
            per_stage: vec![Vec::new(); horizon],
            no_skip: true,
        }
    }

    pub fn with_alpha(&self, alpha: T) -> Self {
        Self {
            alpha,
            ..self.clone()
        }
    }

    pub fn max_norm(&self) -> T {
        self.per_stage
            .iter()
            .flatten()
            .fold(T::zero(), |m, p| m.max(p.norm()))
    }

    pub fn check(&self, l2: T, d0: usize, dim: usize) -> Result<()> {
        if self.max_norm() > l2 + T::tol(1e-9) {
            return Err(invalid("modification point outside B(L2)"));
        }
        if self.per_stage.iter().any(|s| s.len() > d0) {
            return Err(invalid(format!("more than d0 = {d0} points at a stage")));
        }
        if self.per_stage.iter().flatten().any(|p| p.len() != dim) {
            return Err(invalid("modification point has the wrong dimension"));
        }
        Ok(())
    }
}

/// Piecewise-linear skip weight for a state whose parametric range is `range`.
pub fn omega_from_range<T: Real>(range: T, alpha: T, dim: usize) -> T {
    let s = (T::lit(2.0) * T::lit(dim as f64)).sqrt();
    let lo = alpha / (T::lit(2.0) * s);
    let hi = alpha / s;
    if range <= lo {
        T::one()
    } else if range >= hi {
        T::zero()
    } else {
        T::lit(2.0) - T::lit(2.0) * s * range / alpha
    }
}

/// `omega_G` at local state `i` of stage `k`.
pub fn omega<T: Real>(features: &FeatureMap<T>, g: &Modification<T>, k: usize, i: usize) -> T {
    if k + 1 == features.stages().len() {
        return T::zero();
    }
    omega_from_range(range_g(features, g, k, i), g.alpha, features.dim())
}

/// `omega[k][i]`, zero at the terminal state.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipWeights<T: Real> {
    pub omega: Vec<Vec<T>>,
}

impl<T: Real> SkipWeights<T> {
    pub fn compute(mdp: &StagedMdp<T>, features: &FeatureMap<T>, g: &Modification<T>) -> Self {
        let omega = (0..=mdp.horizon())
            .map(|k| {
                (0..mdp.stage_len(k))
                    .map(|i| omega(features, g, k, i))
                    .collect()
            })
            .collect();
        Self { omega }
    }

    /// `value` at every non-terminal state.
    pub fn constant(mdp: &StagedMdp<T>, value: T) -> Self {
        let h = mdp.horizon();
        let omega = (0..=h)
            .map(|k| vec![if k == h { T::zero() } else { value }; mdp.stage_len(k)])
            .collect();
        Self { omega }
    }

    pub fn from_tables(mdp: &StagedMdp<T>, omega: Vec<Vec<T>>) -> Result<Self> {
        let h = mdp.horizon();
        if omega.len() != h + 1
            || omega
                .iter()
                .enumerate()
                .any(|(k, s)| s.len() != mdp.stage_len(k))
        {
            return Err(invalid("skip weights do not match the mdp"));
        }
        if omega
            .iter()
            .flatten()
            .any(|w| *w < T::zero() || *w > T::one())
        {
            return Err(invalid("skip weights must lie in [0, 1]"));
        }
        if omega[h][0] != T::zero() {
            return Err(invalid("the terminal skip weight must be zero"));
        }
        Ok(Self { omega })
    }

    pub fn get(&self, k: usize, i: usize) -> T {
        self.omega[k][i]
    }
}

/// `F(τ) = (1 − ω_τ) Π_{u<τ} ω_u` over the given weights of `s_{h+1}, s_{h+2}, …`.
pub fn stop_distribution<T: Real>(omegas: &[T]) -> Vec<T> {
    let mut carry = T::one();
    omegas
        .iter()
        .map(|w| {
            let f = (T::one() - *w) * carry;
            carry *= *w;
            f
        })
        .collect()
}

/// `π_G(a|s) = π^b(a|s) ω(s) + π(a|s) (1 − ω(s))`.
pub fn skippy_policy<T: Real>(
    pi: &Policy<T>,
    behavior: &Policy<T>,
    skip: &SkipWeights<T>,
) -> Policy<T> {
    let probs: StageTables<T> = pi
        .tables()
        .iter()
        .enumerate()
        .map(|(k, stage)| {
            stage
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let w = skip.get(k, i);
                    row.iter()
                        .zip(behavior.row(k, i))
                        .map(|(p, b)| *b * w + *p * (T::one() - w))
                        .collect()
                })
                .collect()
        })
        .collect();
    Policy::from_tables_unchecked(probs)
}

/// The skippy optimal policy: behavior with weight `ω`, greedy on its own future
/// values otherwise (ties to the lowest action).
pub fn skippy_optimal_policy<T: Real>(
    mdp: &StagedMdp<T>,
    behavior: &Policy<T>,
    skip: &SkipWeights<T>,
) -> Result<(Policy<T>, QTables<T>)> {
    let h = mdp.horizon();
    let a_count = mdp.actions();
    let mut q: StageTables<T> = vec![vec![vec![T::zero(); a_count]]; h + 1];
    let mut v: Vec<Vec<T>> = vec![vec![T::zero()]; h + 1];
    let mut probs: StageTables<T> = vec![Vec::new(); h + 1];
    let mixed = |k: usize, i: usize, row: &[T]| -> Vec<T> {
        let w = skip.get(k, i);
        let g = argmax(row);
        (0..a_count)
            .map(|a| {
                let greedy = if a == g { T::one() } else { T::zero() };
                behavior.prob(k, i, a) * w + greedy * (T::one() - w)
            })
            .collect()
    };
    probs[h] = vec![mixed(h, 0, &q[h][0])];
    for k in (0..h).rev() {
        q[k] = (0..mdp.stage_len(k))
            .map(|i| {
                (0..a_count)
                    .map(|a| mdp.reward(k, i, a) + mdp.expect_next(k, i, a, &v[k + 1]))
                    .collect()
            })
            .collect();
        probs[k] = q[k]
            .iter()
            .enumerate()
            .map(|(i, row)| mixed(k, i, row))
            .collect();
        v[k] = q[k]
            .iter()
            .zip(&probs[k])
            .map(|(row, p)| dot(p, row))
            .collect();
    }
    Ok((Policy::from_tables_unchecked(probs), QTables { q, v }))
}

/// Action-value tables for stages `first..=H`, clipped to `[0, H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedQ<T: Real> {
    first: usize,
    tables: StageTables<T>,
}

impl<T: Real> StagedQ<T> {
    pub fn new(mdp: &StagedMdp<T>, first: usize, tables: StageTables<T>) -> Result<Self> {
        let h = mdp.horizon();
        if first == 0 || first > h || tables.len() != h + 1 - first {
            return Err(invalid(
                "future q tables must cover the stages after h through H+1",
            ));
        }
        let tol = T::tol(1e-9);
        let top = T::lit(h as f64);
        for (t, stage) in tables.iter().enumerate() {
            let k = first + t;
            if stage.len() != mdp.stage_len(k) || stage.iter().any(|r| r.len() != mdp.actions()) {
                return Err(invalid(format!(
                    "future q table of stage {} has wrong shape",
                    k + 1
                )));
            }
            if stage
                .iter()
                .flatten()
                .any(|x| !x.is_finite() || *x < -tol || *x > top + tol)
            {
                return Err(invalid(format!(
                    "future q values at stage {} are not clipped to [0, H]",
                    k + 1
                )));
            }
        }
        if tables[h - first].iter().flatten().any(|x| x.abs() > tol) {
            return Err(invalid("terminal q values must be zero"));
        }
        Ok(Self { first, tables })
    }

    /// The stages `first..=H` of full q tables.
    pub fn from_full(mdp: &StagedMdp<T>, q: &[Vec<Vec<T>>], first: usize) -> Result<Self> {
        Self::new(mdp, first, q[first..].to_vec())
    }

    pub fn first(&self) -> usize {
        self.first
    }

    pub fn stage(&self, k: usize) -> &[Vec<T>] {
        &self.tables[k - self.first]
    }
}

/// How a continuation value `q_u(s, ·)` is collapsed to a state value.
#[derive(Clone, Copy, Debug)]
pub enum Continuation<'a, T: Real> {
    Policy(&'a Policy<T>),
    Greedy,
}

impl<T: Real> Continuation<'_, T> {
    fn value(&self, k: usize, i: usize, row: &[T]) -> T {
        match self {
            Continuation::Policy(pi) => dot(pi.row(k, i), row),
            Continuation::Greedy => row.iter().fold(row[0], |m, x| m.max(*x)),
        }
    }
}

fn exact_backup<T: Real>(
    mdp: &StagedMdp<T>,
    behavior: &Policy<T>,
    skip: &SkipWeights<T>,
    cont: Continuation<'_, T>,
    q_future: &StagedQ<T>,
    k: usize,
    keep_stop_factor: bool,
) -> Result<Vec<Vec<T>>> {
    let h = mdp.horizon();
    if k >= h || q_future.first() != k + 1 {
        return Err(invalid(
            "future q tables must start right after the backed-up stage",
        ));
    }
    let stop = |w: T| {
        if keep_stop_factor {
            T::one() - w
        } else {
            T::one()
        }
    };
    let mut m: Vec<T> = (0..mdp.stage_len(h))
        .map(|i| stop(skip.get(h, i)) * cont.value(h, i, &q_future.stage(h)[i]))
        .collect();
    for u in (k + 1..h).rev() {
        m = (0..mdp.stage_len(u))
            .map(|i| {
                let w = skip.get(u, i);
                let own = stop(w) * cont.value(u, i, &q_future.stage(u)[i]);
                let follow = (0..mdp.actions()).fold(T::zero(), |acc, a| {
                    acc + behavior.prob(u, i, a)
                        * (mdp.reward(u, i, a) + mdp.expect_next(u, i, a, &m))
                });
                own + w * follow
            })
            .collect();
    }
    Ok((0..mdp.stage_len(k))
        .map(|i| {
            (0..mdp.actions())
                .map(|a| mdp.reward(k, i, a) + mdp.expect_next(k, i, a, &m))
                .collect()
        })
        .collect())
}

/// Exact skippy Bellman policy operator at stage `k`.
pub fn exact_t_pi_g<T: Real>(
    mdp: &StagedMdp<T>,
    behavior: &Policy<T>,
    skip: &SkipWeights<T>,
    pi: &Policy<T>,
    q_future: &StagedQ<T>,
    k: usize,
) -> Result<Vec<Vec<T>>> {
    exact_backup(
        mdp,
        behavior,
        skip,
        Continuation::Policy(pi),
        q_future,
        k,
        true,
    )
}

/// Exact skippy Bellman optimality operator at stage `k`.
pub fn exact_t_g<T: Real>(
    mdp: &StagedMdp<T>,
    behavior: &Policy<T>,
    skip: &SkipWeights<T>,
    q_future: &StagedQ<T>,
    k: usize,
) -> Result<Vec<Vec<T>>> {
    exact_backup(mdp, behavior, skip, Continuation::Greedy, q_future, k, true)
}

/// Either operator, selected by `cont`.
pub fn exact_skippy_backup<T: Real>(
    mdp: &StagedMdp<T>,
    behavior: &Policy<T>,
    skip: &SkipWeights<T>,
    cont: Continuation<'_, T>,
    q_future: &StagedQ<T>,
    k: usize,
) -> Result<Vec<Vec<T>>> {
    exact_backup(mdp, behavior, skip, cont, q_future, k, true)
}

/// Fault-injection hook for mutation tests: the policy operator with the
/// `(1 − ω)` stopping factor removed.
#[doc(hidden)]
pub fn exact_t_pi_g_without_stop_factor<T: Real>(
    mdp: &StagedMdp<T>,
    behavior: &Policy<T>,
    skip: &SkipWeights<T>,
    pi: &Policy<T>,
    q_future: &StagedQ<T>,
    k: usize,
) -> Result<Vec<Vec<T>>> {
    exact_backup(
        mdp,
        behavior,
        skip,
        Continuation::Policy(pi),
        q_future,
        k,
        false,
    )
}

/// `Σ_τ (R_{h:τ−1} + c_τ) F(τ)`.
///
/// `rewards` are `R_h..=R_H`, `omegas` the weights of `S_{h+1}..=S_H` and
/// `continuation` the collapsed values `q_τ(S_τ, ·)` for the same states.
pub fn g_target<T: Real>(rewards: &[T], omegas: &[T], continuation: &[T]) -> T {
    let f = stop_distribution(omegas);
    let mut cum = T::zero();
    let mut total = T::zero();
    for (t, (ft, c)) in f.iter().zip(continuation).enumerate() {
        cum += rewards[t];
        total += *ft * (cum + *c);
    }
    total
}

/// [`g_target`] for the suffix of a sampled trajectory starting at stage `k`.
pub fn g_target_on_trajectory<T: Real>(
    mdp: &StagedMdp<T>,
    skip: &SkipWeights<T>,
    cont: Continuation<'_, T>,
    q_future: &StagedQ<T>,
    traj: &Trajectory<T>,
    k: usize,
) -> Result<T> {
    let h = mdp.horizon();
    if traj.steps.len() != h + 1 || q_future.first() != k + 1 {
        return Err(invalid(
            "trajectory suffix does not match the future tables",
        ));
    }
    let mut rewards = Vec::with_capacity(h - k + 1);
    let mut omegas = Vec::with_capacity(h - k);
    let mut values = Vec::with_capacity(h - k);
    for (u, step) in traj.steps.iter().enumerate().skip(k) {
        rewards.push(step.reward);
        if u > k {
            let (su, i) = mdp
                .locate(step.state)
                .ok_or_else(|| invalid("trajectory visits an unknown state"))?;
            if su != u {
                return Err(invalid("trajectory state in the wrong stage"));
            }
            omegas.push(skip.get(u, i));
            values.push(cont.value(u, i, &q_future.stage(u)[i]));
        }
    }
    Ok(g_target(&rewards, &omegas, &values))
}
