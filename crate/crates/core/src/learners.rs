//! The offline optimization and evaluation learners: candidate families,
//! per-candidate confidence recursions, width filters and selection rules.
//!
//! Each candidate runs one canonical least-squares chain rather than the full
//! set of downstream selections; the set influence enters only through the
//! ellipsoid radius and the width statistic.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::features::{point_range, FeatureMap};
use crate::mdp::{backward_q, greedy_policy, occupancy, Dataset, Policy, StagedMdp};
use crate::regression::{
    constants, constrained_ls, ellipsoid_extremes, ConfidenceSet, Constants, Multipliers,
    Objective, ProblemSize, StageDesignMatrix,
};
use crate::scalar::{clip, positive};
use crate::skipping::{
    exact_skippy_backup, omega_from_range, Continuation, Modification, SkipWeights, StagedQ,
};
use crate::{Error, Real, Result};

/// One visited step: the `d x A` feature block of the state, the logged action
/// and reward, and the evaluation/behavior probabilities at the state when known.
#[derive(Clone, Debug)]
pub struct StageSample<T: Real> {
    pub phi: DMatrix<T>,
    pub action: usize,
    pub reward: T,
    pub pi_e: Option<Vec<T>>,
    pub pi_b: Option<Vec<T>>,
}

/// What the learners see of a dataset: features, actions and rewards per stage,
/// with no state identities.
#[derive(Clone, Debug)]
pub struct LearnerData<T: Real> {
    horizon: usize,
    dim: usize,
    actions: usize,
    l1: T,
    /// `[k][j]` for the non-terminal stages.
    samples: Vec<Vec<StageSample<T>>>,
}

impl<T: Real> LearnerData<T> {
    /// Behavior probabilities are attached when `behavior_known`; `pi_e` is
    /// attached when given.
    pub fn from_dataset(
        mdp: &StagedMdp<T>,
        features: &FeatureMap<T>,
        dataset: &Dataset<T>,
        pi_e: Option<&Policy<T>>,
        behavior_known: bool,
    ) -> Result<Self> {
        let h = mdp.horizon();
        if dataset.is_empty() {
            return Err(invalid("empty dataset"));
        }
        if let Some(p) = pi_e {
            p.check(mdp)?;
        }
        let mut samples: Vec<Vec<StageSample<T>>> =
            (0..h).map(|_| Vec::with_capacity(dataset.len())).collect();
        for traj in &dataset.trajectories {
            if traj.steps.len() != h + 1 {
                return Err(invalid("trajectory length does not match the horizon"));
            }
            for (k, step) in traj.steps.iter().take(h).enumerate() {
                let (sk, i) = mdp
                    .locate(step.state)
                    .ok_or_else(|| invalid(format!("unknown state id {}", step.state)))?;
                if sk != k {
                    return Err(invalid(format!(
                        "state {} visited at the wrong stage",
                        step.state
                    )));
                }
                if step.action >= mdp.actions() {
                    return Err(invalid("logged action out of range"));
                }
                samples[k].push(StageSample {
                    phi: features.state_matrix(k, i).clone(),
                    action: step.action,
                    reward: step.reward,
                    pi_e: pi_e.map(|p| p.row(k, i).to_vec()),
                    pi_b: behavior_known.then(|| dataset.behavior.row(k, i).to_vec()),
                });
            }
        }
        Self::new(features.dim(), mdp.actions(), features.l1(), samples)
    }

    pub fn new(
        dim: usize,
        actions: usize,
        l1: T,
        samples: Vec<Vec<StageSample<T>>>,
    ) -> Result<Self> {
        let horizon = samples.len();
        if horizon == 0 || samples[0].is_empty() {
            return Err(invalid(
                "learner data needs at least one stage and one trajectory",
            ));
        }
        let n = samples[0].len();
        for stage in &samples {
            if stage.len() != n {
                return Err(invalid("every stage needs one sample per trajectory"));
            }
            for s in stage {
                if s.phi.shape() != (dim, actions) || s.action >= actions {
                    return Err(invalid("sample shape does not match the feature map"));
                }
                let rows_ok = |p: &Option<Vec<T>>| p.as_ref().is_none_or(|r| r.len() == actions);
                if !rows_ok(&s.pi_e) || !rows_ok(&s.pi_b) {
                    return Err(invalid("policy row has the wrong length"));
                }
            }
        }
        Ok(Self {
            horizon,
            dim,
            actions,
            l1,
            samples,
        })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn l1(&self) -> T {
        self.l1
    }

    pub fn n(&self) -> usize {
        self.samples[0].len()
    }

    pub fn stage(&self, k: usize) -> &[StageSample<T>] {
        &self.samples[k]
    }

    fn has_pi_e(&self) -> bool {
        self.samples.iter().flatten().all(|s| s.pi_e.is_some())
    }

    fn has_pi_b(&self) -> bool {
        self.samples.iter().flatten().all(|s| s.pi_b.is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnerConfig<T> {
    pub eps: T,
    pub delta: T,
    /// `None` selects the automatic setting.
    pub alpha: Option<T>,
    pub multipliers: Multipliers,
    /// Norm bound on the realizability parameters.
    pub l2: T,
    /// Concentrability used when sizing the constants.
    pub concentrability: T,
}

impl<T: Real> LearnerConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let unit = |x: T| x > T::zero() && x < T::one();
        if !unit(self.eps) || !unit(self.delta) {
            return Err(Error::Config("eps and delta must lie in (0, 1)".into()));
        }
        if !positive(self.l2) {
            return Err(Error::Config("l2 must be positive".into()));
        }
        let m = &self.multipliers;
        if [m.beta, m.eps_bar, m.zeta1, m.zeta2, m.alpha]
            .iter()
            .any(|x| !x.is_finite() || *x < 0.0)
        {
            return Err(Error::Config(
                "multipliers must be finite and nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn constants(&self, data: &LearnerData<T>, objective: Objective) -> Result<Constants<T>> {
        self.validate()?;
        let size = ProblemSize {
            horizon: data.horizon(),
            dim: data.dim(),
            actions: data.actions(),
            n: data.n(),
            l1: data.l1(),
            l2: self.l2,
            conc: self.concentrability,
            delta: self.delta,
        };
        constants(&size, objective, self.alpha, &self.multipliers)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Oracle,
    Perturbed,
    Random,
    NoSkip,
    User,
}

/// Which candidates to build, e.g. `oracle,perturbed:3,random:3,noskip`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub oracle: bool,
    pub perturbed: usize,
    pub random: usize,
    pub no_skip: bool,
}

impl Default for FamilySpec {
    fn default() -> Self {
        Self {
            oracle: true,
            perturbed: 3,
            random: 3,
            no_skip: true,
        }
    }
}

impl FromStr for FamilySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = FamilySpec {
            oracle: false,
            perturbed: 0,
            random: 0,
            no_skip: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, count) = match part.split_once(':') {
                Some((n, c)) => {
                    let c = c
                        .parse::<usize>()
                        .map_err(|_| invalid(format!("bad count in family entry `{part}`")))?;
                    (n, c)
                }
                None => (part, 1),
            };
            match name {
                "oracle" => spec.oracle = true,
                "perturbed" => spec.perturbed = count,
                "random" => spec.random = count,
                "noskip" => spec.no_skip = true,
                _ => return Err(invalid(format!("unknown family entry `{name}`"))),
            }
        }
        if spec.size() == 0 {
            return Err(invalid("the candidate family is empty"));
        }
        Ok(spec)
    }
}

impl fmt::Display for FamilySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if self.oracle {
            parts.push("oracle".to_string());
        }
        if self.perturbed > 0 {
            parts.push(format!("perturbed:{}", self.perturbed));
        }
        if self.random > 0 {
            parts.push(format!("random:{}", self.random));
        }
        if self.no_skip {
            parts.push("noskip".to_string());
        }
        f.write_str(&parts.join(","))
    }
}

impl FamilySpec {
    pub fn size(&self) -> usize {
        usize::from(self.oracle) + self.perturbed + self.random + usize::from(self.no_skip)
    }
}

/// A finite, ordered family of modifications sharing one `alpha`.
#[derive(Clone, Debug)]
pub struct CandidateFamily<T: Real> {
    alpha: T,
    members: Vec<(Modification<T>, Provenance)>,
}

impl<T: Real> CandidateFamily<T> {
    pub fn new(members: Vec<(Modification<T>, Provenance)>) -> Result<Self> {
        let Some(first) = members.first() else {
            return Err(invalid("the candidate family is empty"));
        };
        let alpha = first.0.alpha;
        if members.iter().any(|(g, _)| g.alpha != alpha) {
            return Err(invalid("all candidates must share alpha"));
        }
        Ok(Self { alpha, members })
    }

    /// Builds the family from `spec`. `oracle` is the correct modification and
    /// is required for the oracle and perturbed entries; its alpha is replaced.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        spec: &FamilySpec,
        oracle: Option<&Modification<T>>,
        horizon: usize,
        dim: usize,
        d0: usize,
        l2: T,
        alpha: T,
        seed: u64,
    ) -> Result<Self> {
        if (spec.oracle || spec.perturbed > 0) && oracle.is_none() {
            return Err(Error::Config(
                "oracle and perturbed candidates need the correct modification".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut members = Vec::with_capacity(spec.size());
        if spec.oracle {
            members.push((
                oracle.expect("checked").with_alpha(alpha),
                Provenance::Oracle,
            ));
        }
        let scales = [0.1, 0.5, 1.0];
        for t in 0..spec.perturbed {
            let base = oracle.expect("checked");
            let scale = l2 * T::lit(scales[t % scales.len()]);
            let per_stage = base
                .per_stage
                .iter()
                .map(|pts| {
                    pts.iter()
                        .map(|p| perturb(p, scale, l2, &mut rng))
                        .collect()
                })
                .collect();
            members.push((Modification::new(alpha, per_stage)?, Provenance::Perturbed));
        }
        for _ in 0..spec.random {
            let per_stage = (0..horizon)
                .map(|_| {
                    (0..dim.min(d0))
                        .map(|_| uniform_ball(dim, l2, &mut rng))
                        .collect()
                })
                .collect();
            members.push((Modification::new(alpha, per_stage)?, Provenance::Random));
        }
        if spec.no_skip {
            members.push((Modification::no_skip(alpha, horizon), Provenance::NoSkip));
        }
        Self::new(members)
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[(Modification<T>, Provenance)] {
        &self.members
    }

    pub fn get(&self, index: usize) -> &Modification<T> {
        &self.members[index].0
    }
}

fn gaussian<T: Real, R: Rng>(dim: usize, rng: &mut R) -> DVector<T> {
    DVector::from_fn(dim, |_, _| T::lit(rng.sample::<f64, _>(StandardNormal)))
}

fn project_ball<T: Real>(mut v: DVector<T>, radius: T) -> DVector<T> {
    let n = v.norm();
    if n > radius {
        v *= radius / n;
    }
    v
}

fn perturb<T: Real, R: Rng>(p: &DVector<T>, scale: T, l2: T, rng: &mut R) -> DVector<T> {
    let dim = p.len();
    let noise = gaussian::<T, R>(dim, rng) * (scale / T::lit(dim as f64).sqrt());
    project_ball(p + noise, l2)
}

fn uniform_ball<T: Real, R: Rng>(dim: usize, radius: T, rng: &mut R) -> DVector<T> {
    let dir = gaussian::<T, R>(dim, rng);
    let n = dir.norm();
    let u: f64 = rng.random();
    let r = radius * T::lit(u.powf(1.0 / dim as f64));
    if n == T::zero() {
        return DVector::zeros(dim);
    }
    dir * (r / n)
}

/// Exact conditional targets for the regression at stage `k`, given the
/// downstream parameters; used in place of sampled targets in exact mode.
pub trait TargetOracle<T: Real>: Sync {
    fn targets(
        &self,
        g: &Modification<T>,
        objective: Objective,
        k: usize,
        thetas: &[DVector<T>],
    ) -> Result<Vec<T>>;
}

/// Exact skippy backups on the true mdp at the dataset's visited pairs.
pub struct ExactTargets<'a, T: Real> {
    mdp: &'a StagedMdp<T>,
    features: &'a FeatureMap<T>,
    behavior: &'a Policy<T>,
    pi_e: Option<&'a Policy<T>>,
    /// `[k][j] = (local state, action)`.
    visits: Vec<Vec<(usize, usize)>>,
}

impl<'a, T: Real> ExactTargets<'a, T> {
    pub fn new(
        mdp: &'a StagedMdp<T>,
        features: &'a FeatureMap<T>,
        dataset: &'a Dataset<T>,
        pi_e: Option<&'a Policy<T>>,
    ) -> Result<Self> {
        let h = mdp.horizon();
        let mut visits = vec![Vec::with_capacity(dataset.len()); h];
        for traj in &dataset.trajectories {
            for (k, step) in traj.steps.iter().take(h).enumerate() {
                let (_, i) = mdp
                    .locate(step.state)
                    .ok_or_else(|| invalid("unknown state id in dataset"))?;
                visits[k].push((i, step.action));
            }
        }
        Ok(Self {
            mdp,
            features,
            behavior: &dataset.behavior,
            pi_e,
            visits,
        })
    }
}

impl<T: Real> TargetOracle<T> for ExactTargets<'_, T> {
    fn targets(
        &self,
        g: &Modification<T>,
        objective: Objective,
        k: usize,
        thetas: &[DVector<T>],
    ) -> Result<Vec<T>> {
        let mdp = self.mdp;
        let h = mdp.horizon();
        let top = T::lit(h as f64);
        let tables = (k + 1..=h)
            .map(|u| {
                (0..mdp.stage_len(u))
                    .map(|i| {
                        if u == h {
                            vec![T::zero(); mdp.actions()]
                        } else {
                            self.features
                                .linear_values(u, i, &thetas[u])
                                .iter()
                                .map(|x| clip(*x, top))
                                .collect()
                        }
                    })
                    .collect()
            })
            .collect();
        let future = StagedQ::new(mdp, k + 1, tables)?;
        let skip = SkipWeights::compute(mdp, self.features, g);
        let cont = match objective {
            Objective::Opt => Continuation::Greedy,
            Objective::Eval => Continuation::Policy(self.pi_e.ok_or_else(|| {
                Error::Config("exact evaluation targets need the evaluation policy".into())
            })?),
        };
        let table = exact_skippy_backup(mdp, self.behavior, &skip, cont, &future, k)?;
        Ok(self.visits[k].iter().map(|(i, a)| table[*i][*a]).collect())
    }
}

/// Shared, candidate-independent state of the recursions: constants, stage
/// feature rows and design factorizations.
pub struct RecursionContext<'a, T: Real> {
    data: &'a LearnerData<T>,
    objective: Objective,
    constants: Constants<T>,
    rows: Vec<Vec<DVector<T>>>,
    /// Distinct logged feature rows per stage with their multiplicities.
    distinct: Vec<Vec<(DVector<T>, usize)>>,
    designs: Vec<Arc<StageDesignMatrix<T>>>,
    oracle: Option<&'a dyn TargetOracle<T>>,
}

impl<'a, T: Real> RecursionContext<'a, T> {
    pub fn new(
        data: &'a LearnerData<T>,
        objective: Objective,
        constants: Constants<T>,
    ) -> Result<Self> {
        if objective == Objective::Eval && !data.has_pi_e() {
            return Err(Error::Config(
                "evaluation needs the evaluation policy".into(),
            ));
        }
        let rows: Vec<Vec<DVector<T>>> = (0..data.horizon())
            .map(|k| {
                data.stage(k)
                    .iter()
                    .map(|s| s.phi.column(s.action).into_owned())
                    .collect()
            })
            .collect();
        let designs = rows
            .par_iter()
            .map(|r| StageDesignMatrix::new(data.dim(), constants.lambda, r.iter()).map(Arc::new))
            .collect::<Result<Vec<_>>>()?;
        let distinct = rows.iter().map(|r| distinct_rows(r)).collect();
        Ok(Self {
            data,
            objective,
            constants,
            rows,
            distinct,
            designs,
            oracle: None,
        })
    }

    /// Replaces sampled targets with exact ones.
    pub fn with_oracle(mut self, oracle: &'a dyn TargetOracle<T>) -> Self {
        self.oracle = Some(oracle);
        self
    }

    pub fn constants(&self) -> &Constants<T> {
        &self.constants
    }

    pub fn objective(&self) -> Objective {
        self.objective
    }

    pub fn design(&self, k: usize) -> &StageDesignMatrix<T> {
        &self.designs[k]
    }

    fn top(&self) -> T {
        T::lit(self.data.horizon() as f64)
    }

    fn q_row(&self, phi: &DMatrix<T>, theta: &DVector<T>) -> Vec<T> {
        let top = self.top();
        phi.tr_mul(theta).iter().map(|x| clip(*x, top)).collect()
    }

    fn collapse(&self, sample: &StageSample<T>, row: &[T]) -> T {
        match self.objective {
            Objective::Opt => row.iter().fold(row[0], |m, x| m.max(*x)),
            Objective::Eval => dot(sample.pi_e.as_deref().expect("checked"), row),
        }
    }

    fn omega_at(&self, g: &Modification<T>, k: usize, phi: &DMatrix<T>) -> T {
        if g.no_skip || k >= self.data.horizon() {
            return T::zero();
        }
        let range = g
            .per_stage
            .get(k)
            .map_or(T::zero(), |pts| point_range(pts, phi));
        omega_from_range(range, g.alpha, self.data.dim())
    }
}

fn distinct_rows<T: Real>(rows: &[DVector<T>]) -> Vec<(DVector<T>, usize)> {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut out: Vec<(DVector<T>, usize)> = Vec::new();
    for r in rows {
        let key = r.iter().map(|x| x.as_f64().to_bits()).collect();
        match seen.get(&key) {
            Some(&u) => out[u].1 += 1,
            None => {
                seen.insert(key, out.len());
                out.push((r.clone(), 1));
            }
        }
    }
    out
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (x, y)| acc + *x * *y)
}

/// One candidate's canonical chain.
#[derive(Clone, Debug)]
pub struct GRecursion<T: Real> {
    /// `θ̂_k` for `k = 0..=H`, zero at the terminal stage.
    pub thetas: Vec<DVector<T>>,
    pub sets: Vec<ConfidenceSet<T>>,
    /// Mean clipped width of the confidence set at the logged pairs, per stage.
    pub widths: Vec<T>,
    /// `q^G(s1, ·)`.
    pub start_q: Vec<T>,
    /// Skip weight at the start state.
    pub start_omega: T,
    /// Per-stage mean `ω |q(S, π^e) − q(S, π^b)|` (eval only).
    pub advantage: Option<Vec<T>>,
}

impl<T: Real> GRecursion<T> {
    pub fn max_width(&self) -> T {
        self.widths.iter().fold(T::zero(), |m, w| m.max(*w))
    }

    pub fn score(&self) -> Option<T> {
        self.advantage
            .as_ref()
            .map(|a| a.iter().fold(T::zero(), |m, w| m.max(*w)))
    }

    /// `max_a q^G(s1, a)`.
    pub fn start_max(&self) -> T {
        self.start_q.iter().fold(self.start_q[0], |m, x| m.max(*x))
    }

    /// Greedy policy of the chain on the full mdp.
    pub fn greedy_policy(&self, mdp: &StagedMdp<T>, features: &FeatureMap<T>) -> Policy<T> {
        greedy_policy(mdp, &self.q_tables(mdp, features))
    }

    /// `clip(⟨φ(s, a), θ̂_k⟩)` at every state.
    pub fn q_tables(&self, mdp: &StagedMdp<T>, features: &FeatureMap<T>) -> Vec<Vec<Vec<T>>> {
        let top = T::lit(mdp.horizon() as f64);
        (0..=mdp.horizon())
            .map(|k| {
                (0..mdp.stage_len(k))
                    .map(|i| {
                        features
                            .linear_values(k, i, &self.thetas[k])
                            .iter()
                            .map(|x| clip(*x, top))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Runs the backward recursion for one candidate.
pub fn run_recursion<T: Real>(
    ctx: &RecursionContext<'_, T>,
    g: &Modification<T>,
) -> Result<GRecursion<T>> {
    let data = ctx.data;
    let h = data.horizon();
    let n = data.n();
    let dim = data.dim();
    let c = &ctx.constants;
    let top = ctx.top();
    let nt = T::lit(n as f64);
    let mut thetas = vec![DVector::zeros(dim); h + 1];
    let mut sets = Vec::with_capacity(h);
    let mut widths = vec![T::zero(); h];
    let mut advantage = (ctx.objective == Objective::Eval).then(|| vec![T::zero(); h]);
    let mut start_q = Vec::new();
    let mut start_omega = T::zero();
    // m[j]: weighted value of the trajectory suffix beyond the current stage.
    let mut m = vec![T::zero(); n];
    for k in (0..h).rev() {
        let stage = data.stage(k);
        let targets: Vec<T> = match ctx.oracle {
            Some(oracle) => oracle.targets(g, ctx.objective, k, &thetas)?,
            None => stage.iter().zip(&m).map(|(s, mj)| s.reward + *mj).collect(),
        };
        let design = &ctx.designs[k];
        let theta = constrained_ls(design, &ctx.rows[k], &targets, c.l2_prime)?;
        let set = ConfidenceSet::new(theta.clone(), c.beta, c.l2_prime, Arc::clone(design))?;
        let mut width = T::zero();
        for (phi, count) in &ctx.distinct[k] {
            let (lo, hi) = ellipsoid_extremes(&set, phi, top);
            width += T::lit(*count as f64) * (hi - lo);
        }
        let mut adv = T::zero();
        for (j, s) in stage.iter().enumerate() {
            let row = ctx.q_row(&s.phi, &theta);
            let w = ctx.omega_at(g, k, &s.phi);
            if advantage.is_some() {
                let pb = s
                    .pi_b
                    .as_deref()
                    .ok_or_else(|| Error::Config("evaluation needs the behavior policy".into()))?;
                let pe = s.pi_e.as_deref().expect("checked");
                let gap = pe
                    .iter()
                    .zip(pb)
                    .zip(&row)
                    .fold(T::zero(), |acc, ((e, b), q)| acc + (*e - *b) * *q);
                adv += w * gap.abs();
            }
            if ctx.oracle.is_none() {
                m[j] = (T::one() - w) * ctx.collapse(s, &row) + w * targets[j];
            }
            if k == 0 && j == 0 {
                start_q = row;
                start_omega = w;
            }
        }
        widths[k] = width / nt;
        if let Some(a) = advantage.as_mut() {
            a[k] = adv / nt;
        }
        thetas[k] = theta;
        sets.push(set);
    }
    sets.reverse();
    Ok(GRecursion {
        thetas,
        sets,
        widths,
        start_q,
        start_omega,
        advantage,
    })
}

/// Runs every candidate in parallel, preserving family order.
pub fn run_family<T: Real>(
    ctx: &RecursionContext<'_, T>,
    family: &CandidateFamily<T>,
) -> Result<Vec<GRecursion<T>>> {
    if (family.alpha() - ctx.constants.alpha).abs()
        > T::tol(1e-12) * ctx.constants.alpha.max(T::one())
    {
        return Err(Error::Config(
            "candidate family alpha differs from the configured alpha".into(),
        ));
    }
    family
        .members()
        .par_iter()
        .map(|(g, _)| run_recursion(ctx, g))
        .collect()
}

/// Indices of candidates whose worst stage width is at most `eps_bar`.
pub fn filter_g<T: Real>(recursions: &[GRecursion<T>], eps_bar: T) -> Result<Vec<usize>> {
    let accepted: Vec<usize> = recursions
        .iter()
        .enumerate()
        .filter(|(_, r)| r.max_width() <= eps_bar)
        .map(|(i, _)| i)
        .collect();
    if accepted.is_empty() {
        return Err(Error::EmptyFilter {
            worst_widths: recursions.iter().map(|r| r.max_width().as_f64()).collect(),
            threshold: eps_bar.as_f64(),
        });
    }
    Ok(accepted)
}

#[derive(Clone, Debug, Serialize)]
pub struct CandidateReport<T> {
    pub index: usize,
    pub provenance: Provenance,
    pub widths: Vec<T>,
    pub max_width: T,
    pub accepted: bool,
    pub start_value: T,
    pub score: Option<T>,
}

#[derive(Clone, Debug, Serialize)]
pub struct LearnerReport<T> {
    pub objective: Objective,
    pub constants: Constants<T>,
    pub candidates: Vec<CandidateReport<T>>,
    pub accepted: Vec<usize>,
    pub chosen: usize,
    /// Always true: one least-squares chain per candidate stands in for the
    /// set of all downstream selections.
    pub canonical_chain: bool,
}

fn report<T: Real>(
    objective: Objective,
    constants: Constants<T>,
    family: &CandidateFamily<T>,
    recursions: &[GRecursion<T>],
    accepted: &[usize],
    chosen: usize,
    start_value: impl Fn(&GRecursion<T>) -> T,
) -> LearnerReport<T> {
    let candidates = recursions
        .iter()
        .enumerate()
        .map(|(index, r)| CandidateReport {
            index,
            provenance: family.members()[index].1,
            widths: r.widths.clone(),
            max_width: r.max_width(),
            accepted: accepted.contains(&index),
            start_value: start_value(r),
            score: r.score(),
        })
        .collect();
    LearnerReport {
        objective,
        constants,
        candidates,
        accepted: accepted.to_vec(),
        chosen,
        canonical_chain: true,
    }
}

#[derive(Clone, Debug)]
pub struct OptOutcome<T: Real> {
    pub recursion: GRecursion<T>,
    pub start_value: T,
    pub report: LearnerReport<T>,
}

impl<T: Real> OptOutcome<T> {
    pub fn policy(&self, mdp: &StagedMdp<T>, features: &FeatureMap<T>) -> Policy<T> {
        self.recursion.greedy_policy(mdp, features)
    }
}

/// Picks the accepted candidate with the largest `max_a q(s1, a)`.
pub fn opt_learner<T: Real>(
    data: &LearnerData<T>,
    config: &LearnerConfig<T>,
    family: &CandidateFamily<T>,
    oracle: Option<&dyn TargetOracle<T>>,
) -> Result<OptOutcome<T>> {
    let consts = config.constants(data, Objective::Opt)?;
    let mut ctx = RecursionContext::new(data, Objective::Opt, consts)?;
    if let Some(o) = oracle {
        ctx = ctx.with_oracle(o);
    }
    let recursions = run_family(&ctx, family)?;
    let accepted = filter_g(&recursions, consts.eps_bar)?;
    let mut chosen = accepted[0];
    for &i in &accepted[1..] {
        if recursions[i].start_max() > recursions[chosen].start_max() {
            chosen = i;
        }
    }
    let report = report(
        Objective::Opt,
        consts,
        family,
        &recursions,
        &accepted,
        chosen,
        |r| r.start_max(),
    );
    let start_value = recursions[chosen].start_max();
    let recursion = recursions.into_iter().nth(chosen).expect("chosen index");
    Ok(OptOutcome {
        recursion,
        start_value,
        report,
    })
}

#[derive(Clone, Debug)]
pub struct EvalOutcome<T: Real> {
    pub value: T,
    pub recursion: GRecursion<T>,
    pub report: LearnerReport<T>,
}

/// `Σ_a π^e_G(a|s1) q^G(s1, a)`.
fn skippy_start_value<T: Real>(data: &LearnerData<T>, r: &GRecursion<T>) -> T {
    let s = &data.stage(0)[0];
    let pe = s.pi_e.as_deref().expect("checked");
    let pb = s.pi_b.as_deref().expect("checked");
    let w = r.start_omega;
    pe.iter()
        .zip(pb)
        .zip(&r.start_q)
        .fold(T::zero(), |acc, ((e, b), q)| {
            acc + (*b * w + *e * (T::one() - w)) * *q
        })
}

/// Picks the accepted candidate with the smallest advantage score.
pub fn eval_learner<T: Real>(
    data: &LearnerData<T>,
    config: &LearnerConfig<T>,
    family: &CandidateFamily<T>,
    oracle: Option<&dyn TargetOracle<T>>,
) -> Result<EvalOutcome<T>> {
    if !data.has_pi_b() {
        return Err(Error::Config("evaluation needs the behavior policy".into()));
    }
    let consts = config.constants(data, Objective::Eval)?;
    let mut ctx = RecursionContext::new(data, Objective::Eval, consts)?;
    if let Some(o) = oracle {
        ctx = ctx.with_oracle(o);
    }
    let recursions = run_family(&ctx, family)?;
    let accepted = filter_g(&recursions, consts.eps_bar)?;
    let score = |i: usize| recursions[i].score().expect("eval mode");
    let mut chosen = accepted[0];
    for &i in &accepted[1..] {
        if score(i) < score(chosen) {
            chosen = i;
        }
    }
    let report = report(
        Objective::Eval,
        consts,
        family,
        &recursions,
        &accepted,
        chosen,
        |r| skippy_start_value(data, r),
    );
    let value = skippy_start_value(data, &recursions[chosen]);
    let recursion = recursions.into_iter().nth(chosen).expect("chosen index");
    Ok(EvalOutcome {
        value,
        recursion,
        report,
    })
}

/// Classical fitted evaluation (`Eval`) or fitted optimization (`Opt`) with
/// the same ball-constrained ridge regression.
#[derive(Clone, Debug)]
pub struct FittedQ<T: Real> {
    pub thetas: Vec<DVector<T>>,
    pub start_q: Vec<T>,
}

pub fn fitted_q<T: Real>(ctx: &RecursionContext<'_, T>) -> Result<FittedQ<T>> {
    let data = ctx.data;
    let h = data.horizon();
    let n = data.n();
    let mut thetas = vec![DVector::zeros(data.dim()); h + 1];
    let mut next_value = vec![T::zero(); n];
    let mut start_q = Vec::new();
    for k in (0..h).rev() {
        let stage = data.stage(k);
        let targets: Vec<T> = stage
            .iter()
            .zip(&next_value)
            .map(|(s, v)| s.reward + *v)
            .collect();
        let theta = constrained_ls(
            &ctx.designs[k],
            &ctx.rows[k],
            &targets,
            ctx.constants.l2_prime,
        )?;
        for (j, s) in stage.iter().enumerate() {
            let row = ctx.q_row(&s.phi, &theta);
            next_value[j] = ctx.collapse(s, &row);
            if k == 0 && j == 0 {
                start_q = row;
            }
        }
        thetas[k] = theta;
    }
    Ok(FittedQ { thetas, start_q })
}

#[derive(Clone, Debug)]
pub struct ImprovementCheck<T> {
    pub trials: usize,
    /// Smallest `2(H−k)κ − E_ν[v^π − v^{π′}]` seen.
    pub worst_margin: T,
    pub violations: usize,
}

impl<T: Real> ImprovementCheck<T> {
    pub fn holds(&self) -> bool {
        self.violations == 0
    }
}

/// Checks `E_ν[v^π(S_k) − v^{π′}(S_k)] ≤ 2(H−k)κ` for the greedy `π′` of
/// `q_perturbed`, every stage and `trials` random admissible `ν`.
pub fn greedy_improvement_check<T: Real>(
    mdp: &StagedMdp<T>,
    pi: &Policy<T>,
    q_perturbed: &[Vec<Vec<T>>],
    kappa: T,
    trials: usize,
    seed: u64,
) -> Result<ImprovementCheck<T>> {
    let h = mdp.horizon();
    if q_perturbed.len() != h + 1
        || q_perturbed
            .iter()
            .enumerate()
            .any(|(k, s)| s.len() != mdp.stage_len(k))
    {
        return Err(invalid("perturbed q tables do not match the mdp"));
    }
    let greedy = greedy_policy(mdp, q_perturbed);
    let v_pi = backward_q(mdp, pi)?.v;
    let v_greedy = backward_q(mdp, &greedy)?.v;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tol = T::tol(1e-9);
    let mut worst = T::max_value().expect("bounded scalar");
    let mut violations = 0;
    for t in 0..trials {
        let nu_policy = if t % 2 == 0 {
            Policy::random_deterministic(mdp, &mut rng)
        } else {
            Policy::random_stochastic(mdp, &mut rng)
        };
        let nu = occupancy(mdp, &nu_policy)?;
        for k in 0..h {
            let marg = nu.state_marginal(k);
            let lhs = marg.iter().enumerate().fold(T::zero(), |acc, (i, p)| {
                acc + *p * (v_pi[k][i] - v_greedy[k][i])
            });
            let rhs = T::lit(2.0 * (h - k) as f64) * kappa;
            let margin = rhs - lhs;
            worst = worst.min(margin);
            if margin < -tol {
                violations += 1;
            }
        }
    }
    Ok(ImprovementCheck {
        trials,
        worst_margin: worst,
        violations,
    })
}
