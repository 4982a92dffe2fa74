//! Instance generators: the two-stage low-range example, random linear MDPs,
//! a combination-lock chain and random MDPs with injected zero-range gadgets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use skippy_core::features::{audit_realizability, FeatureMap, RealizabilityAudit};
use skippy_core::mdp::{Policy, RewardKind, StagedMdp};
use skippy_core::{Error, Result};

pub const MAX_DIM: usize = 6;
pub const MAX_HORIZON: usize = 8;
pub const MAX_STATES: usize = 12;
pub const MAX_ACTIONS: usize = 4;
const AUDIT_TOL: f64 = 1e-8;
const RETRIES: u64 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceKind {
    Fig1,
    LinearMdpRandom,
    LowRangeInjected,
    Chain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InstanceSpec {
    pub kind: InstanceKind,
    pub d: usize,
    pub horizon: usize,
    pub states_per_stage: usize,
    pub actions: usize,
    pub seed: u64,
    /// Fraction of eligible states turned into zero-range gadgets.
    pub injection_rate: f64,
    pub reward_kind: RewardKind,
}

impl Default for InstanceSpec {
    fn default() -> Self {
        Self {
            kind: InstanceKind::LinearMdpRandom,
            d: 3,
            horizon: 3,
            states_per_stage: 3,
            actions: 2,
            seed: 7,
            injection_rate: 0.5,
            reward_kind: RewardKind::Deterministic,
        }
    }
}

impl InstanceSpec {
    pub fn fig1() -> Self {
        Self {
            kind: InstanceKind::Fig1,
            d: 1,
            horizon: 2,
            states_per_stage: 2,
            actions: 2,
            seed: 0,
            injection_rate: 0.0,
            reward_kind: RewardKind::Deterministic,
        }
    }

    pub fn chain(horizon: usize, actions: usize) -> Self {
        Self {
            kind: InstanceKind::Chain,
            d: 2 * actions,
            horizon,
            states_per_stage: 2,
            actions,
            ..Self::fig1()
        }
    }

    pub fn linear(d: usize, horizon: usize, states: usize, actions: usize, seed: u64) -> Self {
        Self {
            kind: InstanceKind::LinearMdpRandom,
            d,
            horizon,
            states_per_stage: states,
            actions,
            seed,
            ..Self::default()
        }
    }

    pub fn low_range(horizon: usize, states: usize, actions: usize, seed: u64, rate: f64) -> Self {
        Self {
            kind: InstanceKind::LowRangeInjected,
            d: 0,
            horizon,
            states_per_stage: states,
            actions,
            seed,
            injection_rate: rate,
            reward_kind: RewardKind::Deterministic,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.horizon == 0 || self.horizon > MAX_HORIZON {
            return bad(format!("horizon must lie in 1..={MAX_HORIZON}"));
        }
        if self.actions == 0 || self.actions > MAX_ACTIONS {
            return bad(format!("actions must lie in 1..={MAX_ACTIONS}"));
        }
        if self.states_per_stage == 0 || self.states_per_stage > MAX_STATES {
            return bad(format!("states per stage must lie in 1..={MAX_STATES}"));
        }
        if self.kind == InstanceKind::LinearMdpRandom && (self.d == 0 || self.d > MAX_DIM) {
            return bad(format!("d must lie in 1..={MAX_DIM}"));
        }
        if self.kind == InstanceKind::Chain && self.horizon < 2 {
            return bad("the chain needs a horizon of at least 2".into());
        }
        if !(0.0..=1.0).contains(&self.injection_rate) {
            return bad("injection rate must lie in [0, 1]".into());
        }
        let count = (self.actions as f64)
            .powf(self.states_per_stage as f64 * (self.horizon - 1) as f64 + 1.0);
        if count > skippy_core::mdp::POLICY_ENUMERATION_CAP {
            return bad(format!(
                "{count:.3e} deterministic policies exceed the enumeration cap"
            ));
        }
        Ok(())
    }
}

/// A generated instance with its audit.
#[derive(Clone, Debug)]
pub struct Instance {
    pub spec: InstanceSpec,
    pub mdp: StagedMdp<f64>,
    pub features: FeatureMap<f64>,
    pub behavior: Policy<f64>,
    pub audit: RealizabilityAudit<f64>,
    /// Norm bound on the realizability parameters (the audited maximum).
    pub l2: f64,
}

pub fn generate(spec: &InstanceSpec) -> Result<Instance> {
    spec.validate()?;
    let mut last = None;
    for attempt in 0..=RETRIES {
        let seed = spec
            .seed
            .wrapping_add(attempt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let (mdp, features) = match spec.kind {
            InstanceKind::Fig1 => fig1()?,
            InstanceKind::Chain => chain(spec.horizon, spec.actions)?,
            InstanceKind::LinearMdpRandom => linear_mdp(spec, seed)?,
            InstanceKind::LowRangeInjected => low_range(spec, seed)?,
        };
        let audit = audit_realizability(&mdp, &features)?;
        if audit.max_residual <= AUDIT_TOL {
            let behavior = Policy::uniform(&mdp);
            let l2 = audit.max_norm.max(1e-12) * (1.0 + 1e-9);
            let mut spec = spec.clone();
            spec.d = features.dim();
            return Ok(Instance {
                spec,
                mdp,
                features,
                behavior,
                audit,
                l2,
            });
        }
        last = Some(audit.max_residual);
    }
    Err(Error::InvalidInput(format!(
        "realizability audit failed after {RETRIES} retries (residual {:.3e})",
        last.unwrap_or(f64::NAN)
    )))
}

fn stage_ids(sizes: &[usize]) -> Vec<Vec<usize>> {
    let mut next = 0;
    sizes
        .iter()
        .map(|s| {
            let ids = (next..next + s).collect();
            next += s;
            ids
        })
        .collect()
}

fn point(n: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[at] = 1.0;
    v
}

fn simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    draws.iter().map(|x| x / total).collect()
}

/// Up (action 0) from `s1` pays 1 and leads to `s2`, which pays nothing; down
/// pays 0.5 and leads to `s3`, which pays 0.5. Every policy is worth 1.
pub fn fig1() -> Result<(StagedMdp<f64>, FeatureMap<f64>)> {
    let stages = stage_ids(&[1, 2, 1]);
    let transitions = vec![
        vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
        vec![vec![vec![1.0]; 2], vec![vec![1.0]; 2]],
    ];
    let rewards = vec![vec![vec![1.0, 0.5]], vec![vec![0.0, 0.0], vec![0.5, 0.5]]];
    let mdp = StagedMdp::new(
        2,
        stages,
        2,
        transitions,
        rewards,
        RewardKind::Deterministic,
    )?;
    let phi = vec![
        vec![vec![vec![1.0]; 2]],
        vec![vec![vec![0.0]; 2], vec![vec![0.5]; 2]],
        vec![vec![vec![0.0]; 2]],
    ];
    let features = FeatureMap::from_vectors(&mdp, 1, phi)?;
    Ok((mdp, features))
}

/// States `c` (on the lock) and `o` (off it) per stage; only action 0 keeps
/// the lock, which pays 1 at its last step; `o` pays 0.1 forever.
pub fn chain(horizon: usize, actions: usize) -> Result<(StagedMdp<f64>, FeatureMap<f64>)> {
    let mut sizes = vec![1];
    sizes.extend(std::iter::repeat_n(2, horizon - 1));
    sizes.push(1);
    let stages = stage_ids(&sizes);
    let dim = 2 * actions;
    let mut transitions = Vec::with_capacity(horizon);
    let mut rewards = Vec::with_capacity(horizon);
    let mut phi = Vec::with_capacity(horizon + 1);
    for (k, &width) in sizes.iter().enumerate().take(horizon) {
        let last = k + 1 == horizon;
        let target = |class: usize| if last { vec![1.0] } else { point(2, class) };
        let mut tk = Vec::new();
        let mut rk = Vec::new();
        let mut pk = Vec::new();
        for class in 0..width {
            let on_lock = class == 0;
            tk.push(
                (0..actions)
                    .map(|a| target(usize::from(!(on_lock && a == 0))))
                    .collect::<Vec<_>>(),
            );
            rk.push(
                (0..actions)
                    .map(|a| match (on_lock, a) {
                        (true, 0) if last => 1.0,
                        (true, _) => 0.0,
                        (false, _) => 0.1,
                    })
                    .collect::<Vec<_>>(),
            );
            pk.push(
                (0..actions)
                    .map(|a| point(dim, class * actions + a))
                    .collect::<Vec<_>>(),
            );
        }
        transitions.push(tk);
        rewards.push(rk);
        phi.push(pk);
    }
    phi.push(vec![vec![vec![0.0; dim]; actions]]);
    let mdp = StagedMdp::new(
        horizon,
        stages,
        actions,
        transitions,
        rewards,
        RewardKind::Deterministic,
    )?;
    let features = FeatureMap::from_vectors(&mdp, dim, phi)?;
    Ok((mdp, features))
}

/// `P(·|s,a) = Σ_i φ_i(s,a) μ_i` and `r(s,a) = ⟨φ(s,a), w⟩` with features on
/// the simplex, Dirichlet `μ_i` and `w ∈ [0,1]^d`.
fn linear_mdp(spec: &InstanceSpec, seed: u64) -> Result<(StagedMdp<f64>, FeatureMap<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, d, a_count) = (spec.horizon, spec.d, spec.actions);
    let mut sizes = vec![1];
    sizes.extend(std::iter::repeat_n(spec.states_per_stage, h - 1));
    sizes.push(1);
    let stages = stage_ids(&sizes);
    let mut transitions = Vec::with_capacity(h);
    let mut rewards = Vec::with_capacity(h);
    let mut phi = Vec::with_capacity(h + 1);
    for k in 0..h {
        let mu: Vec<Vec<f64>> = (0..d).map(|_| simplex(sizes[k + 1], &mut rng)).collect();
        let w: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let mut tk = Vec::new();
        let mut rk = Vec::new();
        let mut pk = Vec::new();
        for _ in 0..sizes[k] {
            let feats: Vec<Vec<f64>> = (0..a_count).map(|_| simplex(d, &mut rng)).collect();
            tk.push(
                feats
                    .iter()
                    .map(|f| {
                        let mut p: Vec<f64> = (0..sizes[k + 1])
                            .map(|s| f.iter().zip(&mu).map(|(fi, m)| fi * m[s]).sum())
                            .collect();
                        let total: f64 = p.iter().sum();
                        p.iter_mut().for_each(|x| *x /= total);
                        p
                    })
                    .collect::<Vec<_>>(),
            );
            rk.push(
                feats
                    .iter()
                    .map(|f| {
                        f.iter()
                            .zip(&w)
                            .map(|(x, y)| x * y)
                            .sum::<f64>()
                            .clamp(0.0, 1.0)
                    })
                    .collect::<Vec<_>>(),
            );
            pk.push(feats);
        }
        transitions.push(tk);
        rewards.push(rk);
        phi.push(pk);
    }
    phi.push(vec![vec![vec![0.0; d]; a_count]]);
    let mdp = StagedMdp::new(h, stages, a_count, transitions, rewards, spec.reward_kind)?;
    let features = FeatureMap::from_vectors(&mdp, d, phi)?;
    Ok((mdp, features))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Role {
    Regular,
    Gadget(usize, usize),
    Twin,
}

/// Random tabular mdp in which a fraction of states are two-way gadgets: the
/// two action groups reach twin states whose reward difference is offset in
/// the gadget's own rewards, so every policy sees equal action values there
/// and the gadget shares one feature across actions.
fn low_range(spec: &InstanceSpec, seed: u64) -> Result<(StagedMdp<f64>, FeatureMap<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, a_count) = (spec.horizon, spec.actions);
    let mut sizes = vec![1];
    sizes.extend(std::iter::repeat_n(spec.states_per_stage, h - 1));
    sizes.push(1);
    let stages = stage_ids(&sizes);
    let mut roles: Vec<Vec<Role>> = sizes.iter().map(|s| vec![Role::Regular; *s]).collect();
    for k in 0..h.saturating_sub(1) {
        for i in 0..sizes[k] {
            if roles[k][i] != Role::Regular || rng.random::<f64>() >= spec.injection_rate {
                continue;
            }
            let free: Vec<usize> = (0..sizes[k + 1])
                .filter(|j| roles[k + 1][*j] == Role::Regular)
                .take(2)
                .collect();
            if free.len() == 2 {
                roles[k + 1][free[0]] = Role::Twin;
                roles[k + 1][free[1]] = Role::Twin;
                roles[k][i] = Role::Gadget(free[0], free[1]);
            }
        }
    }
    let group_a = a_count.div_ceil(2);
    let mut transitions: Vec<Vec<Vec<Vec<f64>>>> = Vec::with_capacity(h);
    let mut rewards: Vec<Vec<Vec<f64>>> = Vec::with_capacity(h);
    // Twin rewards are fixed by their gadget one stage earlier.
    let mut twin_reward: Vec<Vec<f64>> = sizes.iter().map(|s| vec![0.0; *s]).collect();
    for k in 0..h {
        let next_len = sizes[k + 1];
        let twin_next = simplex(next_len, &mut rng);
        let mut tk = Vec::new();
        let mut rk = Vec::new();
        for i in 0..sizes[k] {
            match roles[k][i] {
                Role::Regular => {
                    tk.push((0..a_count).map(|_| simplex(next_len, &mut rng)).collect());
                    rk.push((0..a_count).map(|_| rng.random::<f64>()).collect());
                }
                Role::Twin => {
                    tk.push(vec![twin_next.clone(); a_count]);
                    rk.push(vec![twin_reward[k][i]; a_count]);
                }
                Role::Gadget(y1, y2) => {
                    let (r1y, r2y) = (rng.random::<f64>(), rng.random::<f64>());
                    twin_reward[k + 1][y1] = r1y;
                    twin_reward[k + 1][y2] = r2y;
                    let lo = (r2y - r1y).max(0.0);
                    let hi = (1.0 + r2y - r1y).min(1.0);
                    let r1 = lo + (hi - lo) * rng.random::<f64>();
                    let r2 = (r1 + r1y - r2y).clamp(0.0, 1.0);
                    tk.push(
                        (0..a_count)
                            .map(|a| point(next_len, if a < group_a { y1 } else { y2 }))
                            .collect(),
                    );
                    rk.push(
                        (0..a_count)
                            .map(|a| if a < group_a { r1 } else { r2 })
                            .collect(),
                    );
                }
            }
        }
        transitions.push(tk);
        rewards.push(rk);
    }
    // One class per (state, action), one shared class at gadgets and twins.
    let classes: Vec<Vec<Vec<usize>>> = roles
        .iter()
        .take(h)
        .map(|stage| {
            let mut next = 0;
            stage
                .iter()
                .map(|role| match role {
                    Role::Regular => {
                        let c = (next..next + a_count).collect();
                        next += a_count;
                        c
                    }
                    _ => {
                        next += 1;
                        vec![next - 1; a_count]
                    }
                })
                .collect()
        })
        .collect();
    let dim = classes
        .iter()
        .map(|s| s.iter().flatten().max().map_or(1, |m| m + 1))
        .max()
        .unwrap_or(1);
    let mut phi: Vec<Vec<Vec<Vec<f64>>>> = classes
        .iter()
        .map(|stage| {
            stage
                .iter()
                .map(|cs| cs.iter().map(|c| point(dim, *c)).collect())
                .collect()
        })
        .collect();
    phi.push(vec![vec![vec![0.0; dim]; a_count]]);
    let mdp = StagedMdp::new(h, stages, a_count, transitions, rewards, spec.reward_kind)?;
    let features = FeatureMap::from_vectors(&mdp, dim, phi)?;
    Ok((mdp, features))
}
