//! Fixed-seed oracle checks of the structural identities and bounds, grouped
//! into suites. Each check reports its measured quantity against its bound.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use skippy_core::features::{
    exact_ranges, fit_stage_values, range_g, true_modification_from_audit, FeatureMap,
};
use skippy_core::learners::{
    fitted_q, greedy_improvement_check, run_recursion, ExactTargets, LearnerData, RecursionContext,
};
use skippy_core::mdp::{
    backward_q, concentrability, occupancy, optimal_q, performance_difference, sample_dataset,
    Policy, StagedMdp,
};
use skippy_core::regression::{
    ball_constrained_solve, constants, covariance_concentration_check, l2_prime, moment_vector,
    ConfidenceSet, Constants, Multipliers, Objective, ProblemSize, StageDesignMatrix,
};
use skippy_core::skipping::{
    exact_skippy_backup, exact_t_g, exact_t_pi_g, exact_t_pi_g_without_stop_factor,
    skippy_optimal_policy, skippy_policy, Continuation, Modification, SkipWeights, StagedQ,
};
use skippy_core::{Error, Result};

use crate::config::LearnerSettings;
use crate::instances::{generate, Instance, InstanceSpec};
use crate::runner::{prepare, run_once};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Lemmas,
    Regression,
    Learners,
    All,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lemmas" => Ok(Suite::Lemmas),
            "regression" => Ok(Suite::Regression),
            "learners" => Ok(Suite::Learners),
            "all" => Ok(Suite::All),
            _ => Err(Error::InvalidInput(format!("unknown suite `{s}`"))),
        }
    }
}

/// Test hook that breaks one operator on purpose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// Drops the `(1 − ω)` stopping factor in the policy operator.
    DropStopFactor,
}

#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: &'static str,
    /// What is being checked, in words.
    pub anchor: &'static str,
    pub measured: f64,
    pub bound: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn at_most(
        name: &'static str,
        anchor: &'static str,
        measured: f64,
        bound: f64,
        detail: String,
    ) -> Self {
        Self {
            name,
            anchor,
            measured,
            bound,
            passed: measured <= bound,
            detail,
        }
    }

    fn at_least(
        name: &'static str,
        anchor: &'static str,
        measured: f64,
        bound: f64,
        detail: String,
    ) -> Self {
        Self {
            name,
            anchor,
            measured,
            bound,
            passed: measured >= bound,
            detail,
        }
    }

    /// `bound − measured` for upper bounds, `measured − bound` for lower bounds.
    pub fn margin(&self) -> f64 {
        (self.bound - self.measured).abs() * if self.passed { 1.0 } else { -1.0 }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} measured {:.3e} bound {:.3e}  ({}; {})",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.bound,
            self.anchor,
            self.detail
        )
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub suite: Suite,
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

pub fn verify(suite: Suite, fault: Fault) -> Result<Report> {
    let mut checks = Vec::new();
    if matches!(suite, Suite::Lemmas | Suite::All) {
        checks.push(policy_operator_fixed_point(30, 11, fault)?);
        checks.push(optimality_operator_fixed_point(30, 12)?);
        checks.push(skipping_loss(20, 50, 13)?);
        checks.push(range_bound(20, 14)?);
        checks.push(completeness(20, 15)?);
        checks.push(performance_difference_identity(50, 16)?);
        checks.push(change_of_measure(50, 17)?);
        for (i, kappa) in [0.0, 0.1, 0.5].into_iter().enumerate() {
            checks.push(policy_improvement(50, kappa, 18 + i as u64)?);
        }
    }
    if matches!(suite, Suite::Regression | Suite::All) {
        checks.push(constrained_ls_kkt(100, 21)?);
        checks.push(ellipsoid_support(50, 22)?);
        checks.push(covariance_bound(20, 1024, 23)?.0);
    }
    if matches!(suite, Suite::Learners | Suite::All) {
        checks.push(exact_chain(Objective::Eval, 31)?);
        checks.push(exact_chain(Objective::Opt, 32)?);
        checks.push(fqe_equivalence(33)?);
        checks.push(fig1_evaluation(2048, 34)?);
    }
    Ok(Report { suite, checks })
}

/// Small instances of every generator kind, cycling through shapes.
pub fn pool_spec(index: usize, seed: u64) -> InstanceSpec {
    let s = seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    match index % 5 {
        0 => InstanceSpec::linear(2, 3, 2, 2, s),
        1 => InstanceSpec::linear(3, 2, 3, 2, s),
        2 => InstanceSpec::low_range(3, 2, 2, s, 0.7),
        3 => InstanceSpec::linear(2, 3, 2, 3, s),
        _ => InstanceSpec::chain(3, 2),
    }
}

pub fn pool_instance(index: usize, seed: u64) -> Result<Instance> {
    generate(&pool_spec(index, seed))
}

fn random_policy<R: Rng>(mdp: &StagedMdp<f64>, rng: &mut R) -> Policy<f64> {
    if rng.random::<bool>() {
        Policy::random_deterministic(mdp, rng)
    } else {
        Policy::random_stochastic(mdp, rng)
    }
}

/// Arbitrary points and scale, so skip weights cover `{0}`, `(0, 1)` and `{1}`.
fn random_modification<R: Rng>(inst: &Instance, rng: &mut R) -> Modification<f64> {
    let d = inst.features.dim();
    let alpha = 0.05 + 0.95 * rng.random::<f64>();
    let per_stage = (0..inst.mdp.horizon())
        .map(|_| {
            let count = 1 + rng.random_range(0..d);
            (0..count)
                .map(|_| {
                    let scale = alpha * rng.random::<f64>();
                    DVector::from_fn(d, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
                })
                .collect()
        })
        .collect();
    Modification::new(alpha, per_stage).expect("alpha is positive")
}

fn future_of(mdp: &StagedMdp<f64>, q: &[Vec<Vec<f64>>], k: usize) -> Result<StagedQ<f64>> {
    StagedQ::from_full(mdp, q, k + 1)
}

fn max_table_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

/// `q^{π_G}` is the fixed point of the skippy policy operator at every stage.
pub fn policy_operator_fixed_point(trials: usize, seed: u64, fault: Fault) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let inst = pool_instance(t, seed)?;
        let mdp = &inst.mdp;
        let pi = random_policy(mdp, &mut rng);
        let g = random_modification(&inst, &mut rng);
        let skip = SkipWeights::compute(mdp, &inst.features, &g);
        let pi_g = skippy_policy(&pi, &inst.behavior, &skip);
        let q = backward_q(mdp, &pi_g)?.q;
        for k in 0..mdp.horizon() {
            let future = future_of(mdp, &q, k)?;
            let backed = match fault {
                Fault::None => exact_t_pi_g(mdp, &inst.behavior, &skip, &pi, &future, k)?,
                Fault::DropStopFactor => {
                    exact_t_pi_g_without_stop_factor(mdp, &inst.behavior, &skip, &pi, &future, k)?
                }
            };
            worst = worst.max(max_table_gap(&backed, &q[k]));
        }
    }
    Ok(Check::at_most(
        "policy_operator_fixed_point",
        "skippy policy values solve the skippy policy backup",
        worst,
        1e-9,
        format!("{trials} random (mdp, policy, modification) triples"),
    ))
}

/// `q^{π*_G}` is the fixed point of the skippy optimality operator.
pub fn optimality_operator_fixed_point(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let inst = pool_instance(t, seed)?;
        let mdp = &inst.mdp;
        let g = random_modification(&inst, &mut rng);
        let skip = SkipWeights::compute(mdp, &inst.features, &g);
        let (pi_star_g, _) = skippy_optimal_policy(mdp, &inst.behavior, &skip)?;
        let q = backward_q(mdp, &pi_star_g)?.q;
        for k in 0..mdp.horizon() {
            let future = future_of(mdp, &q, k)?;
            let backed = exact_t_g(mdp, &inst.behavior, &skip, &future, k)?;
            worst = worst.max(max_table_gap(&backed, &q[k]));
        }
    }
    Ok(Check::at_most(
        "optimality_operator_fixed_point",
        "skippy optimal values solve the skippy optimality backup",
        worst,
        1e-9,
        format!("{trials} random (mdp, modification) pairs"),
    ))
}

const ALPHAS: [f64; 4] = [0.05, 0.2, 0.5, 1.0];

/// Skipping with the design-basis modification loses at most `Hα`, for every
/// policy and for the optimal policy.
pub fn skipping_loss(instances: usize, policies: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for t in 0..instances {
        let inst = pool_instance(t, seed)?;
        let mdp = &inst.mdp;
        let alpha = ALPHAS[t % ALPHAS.len()];
        let g =
            true_modification_from_audit(&inst.features, inst.audit.clone(), alpha)?.modification;
        let skip = SkipWeights::compute(mdp, &inst.features, &g);
        let h_alpha = mdp.horizon() as f64 * alpha;
        for _ in 0..policies {
            let pi = random_policy(mdp, &mut rng);
            let pi_g = skippy_policy(&pi, &inst.behavior, &skip);
            let gap =
                (backward_q(mdp, &pi)?.start_value() - backward_q(mdp, &pi_g)?.start_value()).abs();
            worst = worst.max(gap - h_alpha);
        }
        let v_star = optimal_q(mdp).0.start_value();
        let (pi_star_g, _) = skippy_optimal_policy(mdp, &inst.behavior, &skip)?;
        let gap = v_star - backward_q(mdp, &pi_star_g)?.start_value();
        worst = worst.max(gap - h_alpha).max(-gap);
    }
    Ok(Check::at_most(
        "skipping_loss",
        "|v^π − v^{π_G}| ≤ Hα and 0 ≤ v* − v^{π*_G} ≤ Hα",
        worst,
        1e-9,
        format!("{instances} instances x {policies} policies; worst excess outside the interval"),
    ))
}

/// `range(s) ≤ √(2d) · range_{G*}(s)` at every non-terminal state.
pub fn range_bound(instances: usize, seed: u64) -> Result<Check> {
    let mut worst = f64::NEG_INFINITY;
    let mut states = 0;
    for t in 0..instances {
        let inst = pool_instance(t, seed)?;
        let g = true_modification_from_audit(&inst.features, inst.audit.clone(), 1.0)?.modification;
        let ranges = exact_ranges(&inst.mdp)?;
        let scale = (2.0 * inst.features.dim() as f64).sqrt();
        for (k, stage) in ranges.iter().enumerate().take(inst.mdp.horizon()) {
            for (i, r) in stage.iter().enumerate() {
                worst = worst.max(r - scale * range_g(&inst.features, &g, k, i));
                states += 1;
            }
        }
    }
    Ok(Check::at_most(
        "range_bound",
        "true range is at most √(2d) times the design-basis range",
        worst,
        1e-9,
        format!("{states} states over {instances} instances; worst excess"),
    ))
}

fn clipped_linear_future<R: Rng>(
    inst: &Instance,
    k: usize,
    radius: f64,
    rng: &mut R,
) -> Vec<Vec<Vec<f64>>> {
    let mdp = &inst.mdp;
    let h = mdp.horizon();
    let d = inst.features.dim();
    let top = h as f64;
    let mut q = vec![Vec::new(); h + 1];
    for (u, qu) in q.iter_mut().enumerate().skip(k + 1) {
        if u == h {
            *qu = vec![vec![0.0; mdp.actions()]];
            continue;
        }
        let theta = DVector::from_fn(d, |_, _| {
            radius * rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt()
        });
        *qu = (0..mdp.stage_len(u))
            .map(|i| {
                inst.features
                    .linear_values(u, i, &theta)
                    .iter()
                    .map(|x| x.clamp(0.0, top))
                    .collect()
            })
            .collect();
    }
    q
}

/// Skippy backups of clipped linear futures under the design-basis
/// modification are linear with parameter norm at most `L′₂`.
pub fn completeness(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_resid = 0.0f64;
    let mut worst_norm_excess = f64::NEG_INFINITY;
    for t in 0..trials {
        let inst = pool_instance(t, seed)?;
        let mdp = &inst.mdp;
        let alpha = ALPHAS[t % ALPHAS.len()];
        let tm = true_modification_from_audit(&inst.features, inst.audit.clone(), alpha)?;
        let d0 = tm.designs.iter().map(|d| d.d0).max().unwrap_or(1);
        let bound = l2_prime(inst.l2, mdp.horizon(), d0, alpha);
        let skip = SkipWeights::compute(mdp, &inst.features, &tm.modification);
        let pi_e = random_policy(mdp, &mut rng);
        for k in 0..mdp.horizon() {
            let q = clipped_linear_future(&inst, k, 2.0 * mdp.horizon() as f64, &mut rng);
            let future = future_of(mdp, &q, k)?;
            for cont in [Continuation::Greedy, Continuation::Policy(&pi_e)] {
                let table = exact_skippy_backup(mdp, &inst.behavior, &skip, cont, &future, k)?;
                let (theta, resid) = fit_stage_values(&inst.features, k, &table);
                worst_resid = worst_resid.max(resid);
                worst_norm_excess = worst_norm_excess.max(theta.norm() - bound);
            }
        }
    }
    let passed = worst_resid <= 1e-6 && worst_norm_excess <= 1e-9;
    Ok(Check {
        name: "completeness",
        anchor: "skippy backups of clipped linear futures stay linear within L′₂",
        measured: worst_resid,
        bound: 1e-6,
        passed,
        detail: format!("{trials} futures; worst norm excess over L′₂ {worst_norm_excess:.3e}"),
    })
}

pub fn performance_difference_identity(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for t in 0..trials {
        let inst = pool_instance(t, seed)?;
        let pi = random_policy(&inst.mdp, &mut rng);
        let pi_bar = random_policy(&inst.mdp, &mut rng);
        worst = worst.max(performance_difference(&inst.mdp, &pi, &pi_bar)?);
    }
    Ok(Check::at_most(
        "performance_difference",
        "v^π − v^π̄ equals the summed advantages of π̄ under π's occupancy",
        worst,
        1e-9,
        format!("{trials} random policy pairs"),
    ))
}

pub fn change_of_measure(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for t in 0..trials {
        let inst = pool_instance(t, seed)?;
        let mdp = &inst.mdp;
        let c_star = concentrability(mdp, &inst.behavior)?
            .value()
            .ok_or_else(|| Error::InvalidInput("uniform behavior must cover every pair".into()))?;
        let mu = occupancy(mdp, &inst.behavior)?;
        let nu = occupancy(mdp, &Policy::random_deterministic(mdp, &mut rng))?;
        for k in 0..mdp.horizon() {
            let f: Vec<Vec<f64>> = (0..mdp.stage_len(k))
                .map(|_| (0..mdp.actions()).map(|_| rng.random::<f64>()).collect())
                .collect();
            let lhs = nu.expectation(k, |i, a| f[i][a]);
            let rhs = c_star * mu.expectation(k, |i, a| f[i][a]);
            worst = worst.max(lhs - rhs);
            if lhs > rhs + 1e-12 {
                violations += 1;
            }
        }
    }
    Ok(Check::at_most(
        "change_of_measure",
        "E_ν f ≤ C* E_μ f for nonnegative f",
        violations as f64,
        0.0,
        format!("{trials} trials; worst lhs − rhs {worst:.3e}"),
    ))
}

pub fn policy_improvement(trials: usize, kappa: f64, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for t in 0..trials {
        let inst = pool_instance(t, seed)?;
        let mdp = &inst.mdp;
        let pi = random_policy(mdp, &mut rng);
        let q = backward_q(mdp, &pi)?.q;
        let perturbed: Vec<Vec<Vec<f64>>> = q
            .iter()
            .map(|stage| {
                stage
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|x| x + kappa * (2.0 * rng.random::<f64>() - 1.0))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let check = greedy_improvement_check(mdp, &pi, &perturbed, kappa, 50, rng.random())?;
        violations += check.violations;
        worst = worst.min(check.worst_margin);
    }
    Ok(Check::at_most(
        match kappa {
            0.0 => "policy_improvement_k0",
            k if k <= 0.1 => "policy_improvement_k0.1",
            _ => "policy_improvement_k0.5",
        },
        "greedy on a κ-perturbed q loses at most 2(H−k)κ",
        violations as f64,
        0.0,
        format!("{trials} trials x 50 occupancies, κ = {kappa}; worst margin {worst:.3e}"),
    ))
}

/// The ball-constrained solution satisfies the KKT conditions.
pub fn constrained_ls_kkt(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let d = rng.random_range(1..=5);
        let n = rng.random_range(1..=40);
        let lambda = 10f64.powf(rng.random_range(-3.0..1.0));
        let rows: Vec<DVector<f64>> = (0..n)
            .map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let targets: Vec<f64> = (0..n).map(|_| 5.0 * rng.random::<f64>()).collect();
        let design = StageDesignMatrix::new(d, lambda, rows.iter())?;
        let b = moment_vector(d, &rows, &targets);
        let bound = 0.1 + 3.0 * rng.random::<f64>();
        let theta = ball_constrained_solve(&design, &b, bound);
        let grad = design.x_hat() * &theta - &b;
        let gap = if theta.norm() < bound * (1.0 - 1e-9) {
            grad.amax()
        } else {
            // grad = −μθ with μ ≥ 0.
            let mu = -grad.dot(&theta) / theta.norm_squared();
            let resid = (&grad + &theta * mu).amax();
            resid.max(-mu).max((theta.norm() - bound).abs())
        };
        worst = worst.max(gap / (1.0 + b.amax()));
    }
    Ok(Check::at_most(
        "constrained_ls_kkt",
        "ridge solution inside the ball or a stationary point on its boundary",
        worst,
        1e-8,
        format!("{trials} random problems; relative KKT residual"),
    ))
}

/// Closed-form support of the ellipsoid∩ball is never beaten by sampled
/// members and is nearly attained by them in two dimensions.
pub fn ellipsoid_support(trials: usize, seed: u64) -> Result<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = f64::NEG_INFINITY;
    let mut shortfall = 0.0f64;
    for _ in 0..trials {
        let d = 2;
        let m = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let x = &m * m.transpose() + DMatrix::identity(d, d) * 0.1;
        let design = std::sync::Arc::new(StageDesignMatrix::from_matrix(x, 0.1)?);
        let center = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let bound = center.norm() * (1.0 + 0.5 * rng.random::<f64>());
        let beta = 0.2 + 2.0 * rng.random::<f64>();
        let cs = ConfidenceSet::new(center.clone(), beta, bound, design.clone())?;
        let phi = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let support = cs.support(&phi);
        // Polar grid over the ellipsoid, keeping members of the ball.
        let chol = design
            .x_hat()
            .clone()
            .cholesky()
            .expect("positive definite");
        let mut best = f64::NEG_INFINITY;
        for s in 0..2000 {
            let ang = std::f64::consts::TAU * s as f64 / 2000.0;
            let u = DVector::from_vec(vec![ang.cos(), ang.sin()]) * beta;
            let step = chol
                .l()
                .transpose()
                .solve_upper_triangular(&u)
                .expect("triangular solve");
            for r in 0..=400 {
                let theta = &center + &step * (r as f64 / 400.0);
                if theta.norm() <= bound {
                    best = best.max(phi.dot(&theta));
                }
            }
        }
        exceed = exceed.max(best - support);
        shortfall = shortfall.max((support - best) / (1.0 + support.abs()));
    }
    let passed = exceed <= 1e-9 && shortfall <= 1e-2;
    Ok(Check {
        name: "ellipsoid_support",
        anchor: "support of the ellipsoid∩ball confidence set",
        measured: exceed,
        bound: 1e-9,
        passed,
        detail: format!(
            "{trials} random sets; worst relative shortfall of samples {shortfall:.3e}"
        ),
    })
}

/// Fraction of seeds meeting the per-stage `15d/n` bound on the default instance.
pub fn covariance_bound(seeds: usize, n: usize, seed: u64) -> Result<(Check, f64)> {
    let inst = generate(&InstanceSpec::default())?;
    let settings = LearnerSettings::default();
    let prep_c = concentrability(&inst.mdp, &inst.behavior)?
        .value()
        .unwrap_or(1.0);
    let consts = instance_constants(&inst, prep_c, n, &settings)?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|s| seed + s).collect();
    let report = covariance_concentration_check(
        &inst.mdp,
        &inst.behavior,
        &inst.features,
        n,
        &seed_list,
        consts.lambda,
        settings.delta,
    )?;
    let frac = report.pass_fraction();
    Ok((
        Check::at_least(
            "covariance_bound",
            "E‖φ‖²_{X̂⁻¹} ≤ 15d/n per stage",
            frac,
            0.95,
            format!(
                "{seeds} seeds at n = {n}; mean {:.3e} vs bound {:.3e}",
                report.mean_expectation(),
                report.bound
            ),
        ),
        report.mean_expectation(),
    ))
}

pub fn instance_constants(
    inst: &Instance,
    c_star: f64,
    n: usize,
    settings: &LearnerSettings,
) -> Result<Constants<f64>> {
    let size = ProblemSize {
        horizon: inst.mdp.horizon(),
        dim: inst.features.dim(),
        actions: inst.mdp.actions(),
        n,
        l1: inst.features.l1(),
        l2: inst.l2,
        conc: c_star,
        delta: settings.delta,
    };
    constants(&size, settings.mode, settings.alpha, &settings.multipliers)
}

/// Exact skippy backups chained from the terminal stage through clipping.
pub fn exact_chain_tables(
    mdp: &StagedMdp<f64>,
    features: &FeatureMap<f64>,
    behavior: &Policy<f64>,
    g: &Modification<f64>,
    cont: Continuation<'_, f64>,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let _ = features;
    let h = mdp.horizon();
    let top = h as f64;
    let skip = SkipWeights::compute(mdp, features, g);
    let mut q: Vec<Vec<Vec<f64>>> = vec![Vec::new(); h + 1];
    q[h] = vec![vec![0.0; mdp.actions()]];
    for k in (0..h).rev() {
        let future = future_of(mdp, &q, k)?;
        let table = exact_skippy_backup(mdp, behavior, &skip, cont, &future, k)?;
        q[k] = table
            .into_iter()
            .map(|row| row.into_iter().map(|x| x.clamp(0.0, top)).collect())
            .collect();
    }
    Ok(q)
}

/// With exact targets and a zero confidence radius, the learner's chain for
/// the design-basis modification reproduces the exact operator chain.
pub fn exact_chain(objective: Objective, seed: u64) -> Result<Check> {
    let inst = generate(&InstanceSpec::linear(3, 3, 3, 2, seed))?;
    let mdp = &inst.mdp;
    let n = 4096;
    let alpha = 1e-3;
    let g = true_modification_from_audit(&inst.features, inst.audit.clone(), alpha)?.modification;
    let pi_e = Policy::random_stochastic(mdp, &mut ChaCha8Rng::seed_from_u64(seed));
    let data_set = sample_dataset(mdp, &inst.behavior, n, seed)?;
    let eval = objective == Objective::Eval;
    let data =
        LearnerData::from_dataset(mdp, &inst.features, &data_set, eval.then_some(&pi_e), true)?;
    let settings = LearnerSettings {
        mode: objective,
        alpha: Some(alpha),
        multipliers: Multipliers {
            beta: 0.0,
            ..Multipliers::default()
        },
        ..LearnerSettings::default()
    };
    let c_star = concentrability(mdp, &inst.behavior)?.value().unwrap_or(1.0);
    let consts = instance_constants(&inst, c_star, n, &settings)?;
    let oracle = ExactTargets::new(mdp, &inst.features, &data_set, eval.then_some(&pi_e))?;
    let ctx = RecursionContext::new(&data, objective, consts)?.with_oracle(&oracle);
    let rec = run_recursion(&ctx, &g)?;
    let cont = if eval {
        Continuation::Policy(&pi_e)
    } else {
        Continuation::Greedy
    };
    let truth = exact_chain_tables(mdp, &inst.features, &inst.behavior, &g, cont)?;
    let learned = rec.q_tables(mdp, &inst.features);
    let worst = truth
        .iter()
        .zip(&learned)
        .fold(0.0f64, |m, (a, b)| m.max(max_table_gap(a, b)));
    let widths = rec.max_width();
    Ok(Check::at_most(
        if eval {
            "exact_chain_eval"
        } else {
            "exact_chain_opt"
        },
        "learner chain with exact targets and zero radius matches the exact backups",
        worst.max(widths),
        1e-6,
        format!("n = {n}, α = {alpha}; max width {widths:.1e}"),
    ))
}

/// With every skip weight zero the evaluation recursion is classical FQE.
pub fn fqe_equivalence(seed: u64) -> Result<Check> {
    let inst = generate(&InstanceSpec::linear(3, 3, 3, 2, seed))?;
    let mdp = &inst.mdp;
    let n = 1024;
    let pi_e = Policy::random_stochastic(mdp, &mut ChaCha8Rng::seed_from_u64(seed));
    let ds = sample_dataset(mdp, &inst.behavior, n, seed)?;
    let data = LearnerData::from_dataset(mdp, &inst.features, &ds, Some(&pi_e), true)?;
    let settings = LearnerSettings::default();
    let c_star = concentrability(mdp, &inst.behavior)?.value().unwrap_or(1.0);
    let consts = instance_constants(&inst, c_star, n, &settings)?;
    let ctx = RecursionContext::new(&data, Objective::Eval, consts)?;
    let rec = run_recursion(&ctx, &Modification::no_skip(consts.alpha, mdp.horizon()))?;
    let fqe = fitted_q(&ctx)?;
    let worst = rec
        .thetas
        .iter()
        .zip(&fqe.thetas)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).amax()));
    Ok(Check::at_most(
        "fqe_equivalence",
        "zero skipping reduces the recursion to fitted evaluation",
        worst,
        1e-9,
        format!("n = {n}"),
    ))
}

pub fn fig1_evaluation(n: usize, seed: u64) -> Result<Check> {
    let settings = LearnerSettings::default();
    let prep = prepare(&InstanceSpec::fig1(), &settings)?;
    let run = run_once(&prep, &settings, n, seed)?;
    Ok(Check::at_most(
        "fig1_evaluation",
        "evaluation of the up policy on the two-stage example",
        run.error,
        0.05,
        format!("n = {n}, v̂ = {:.6}", run.estimate),
    ))
}
