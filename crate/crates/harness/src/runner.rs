//! One learner run against a generated instance, scored by exact dynamic
//! programming.

use serde::Serialize;
use skippy_core::features::{true_modification_from_audit, TrueModification};
use skippy_core::learners::{
    eval_learner, opt_learner, CandidateFamily, ExactTargets, LearnerData, LearnerReport,
    Provenance, TargetOracle,
};
use skippy_core::mdp::{backward_q, concentrability, optimal_q, sample_dataset, Policy};
use skippy_core::regression::{required_samples, Constants, Objective};
use skippy_core::{Error, Result};

use crate::config::LearnerSettings;
use crate::instances::{generate, Instance, InstanceSpec};

/// An instance with everything that does not depend on `n` or the seed.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub instance: Instance,
    pub c_star: f64,
    /// Design-basis modification; its alpha is replaced per run.
    pub g_star: TrueModification<f64>,
    pub pi_e: Policy<f64>,
    pub v_pi_e: f64,
    pub v_star: f64,
}

pub fn prepare(spec: &InstanceSpec, settings: &LearnerSettings) -> Result<Prepared> {
    let instance = generate(spec)?;
    let c_star = concentrability(&instance.mdp, &instance.behavior)?
        .value()
        .ok_or_else(|| Error::Config("the behavior policy does not cover every policy".into()))?;
    let g_star = true_modification_from_audit(&instance.features, instance.audit.clone(), 1.0)?;
    let pi_e = settings.eval_policy.build(&instance.mdp)?;
    let v_pi_e = backward_q(&instance.mdp, &pi_e)?.start_value();
    let v_star = optimal_q(&instance.mdp).0.start_value();
    Ok(Prepared {
        instance,
        c_star,
        g_star,
        pi_e,
        v_pi_e,
        v_star,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub n: usize,
    pub seed: u64,
    pub mode: Objective,
    /// `v̂` for evaluation, `v^{π̂}(s1)` for optimization.
    pub estimate: f64,
    /// `v^{π^e}(s1)` or `v*(s1)`.
    pub oracle: f64,
    pub error: f64,
    pub chosen: usize,
    pub chosen_provenance: Provenance,
    pub accepted: usize,
    pub family_size: usize,
    pub g_star_accepted: bool,
    pub sub_threshold: bool,
    pub c_star: f64,
    pub constants: Constants<f64>,
    pub report: LearnerReport<f64>,
}

/// Seed for the candidate family, kept apart from the dataset stream.
fn family_seed(seed: u64) -> u64 {
    seed ^ 0x5eed_fa11_0000_0000
}

pub fn run_once(
    prep: &Prepared,
    settings: &LearnerSettings,
    n: usize,
    seed: u64,
) -> Result<RunResult> {
    let inst = &prep.instance;
    let mdp = &inst.mdp;
    let dataset = sample_dataset(mdp, &inst.behavior, n, seed)?;
    let mode = settings.mode;
    let pi_e = (mode == Objective::Eval).then_some(&prep.pi_e);
    let data =
        LearnerData::from_dataset(mdp, &inst.features, &dataset, pi_e, mode == Objective::Eval)?;
    let config = settings.learner_config(inst.l2, prep.c_star);
    let consts = config.constants(&data, mode)?;
    let family = CandidateFamily::build(
        &settings.family,
        Some(&prep.g_star.modification),
        mdp.horizon(),
        inst.features.dim(),
        consts.d0,
        inst.l2,
        consts.alpha,
        family_seed(seed),
    )?;
    let exact = if settings.exact_targets {
        Some(ExactTargets::new(mdp, &inst.features, &dataset, pi_e)?)
    } else {
        None
    };
    let oracle = exact.as_ref().map(|e| e as &dyn TargetOracle<f64>);
    let (estimate, truth, report) = match mode {
        Objective::Eval => {
            let out = eval_learner(&data, &config, &family, oracle)?;
            (out.value, prep.v_pi_e, out.report)
        }
        Objective::Opt => {
            let out = opt_learner(&data, &config, &family, oracle)?;
            let pi_hat = out.policy(mdp, &inst.features);
            let v = backward_q(mdp, &pi_hat)?.start_value();
            (v, prep.v_star, out.report)
        }
    };
    let error = match mode {
        Objective::Eval => (estimate - truth).abs(),
        Objective::Opt => truth - estimate,
    };
    let g_star_accepted = family
        .members()
        .iter()
        .enumerate()
        .any(|(i, (_, p))| *p == Provenance::Oracle && report.accepted.contains(&i));
    let required = required_samples(
        inst.features.l1(),
        inst.features.dim(),
        mdp.horizon(),
        settings.delta,
    );
    Ok(RunResult {
        n,
        seed,
        mode,
        estimate,
        oracle: truth,
        error,
        chosen: report.chosen,
        chosen_provenance: family.members()[report.chosen].1,
        accepted: report.accepted.len(),
        family_size: family.len(),
        g_star_accepted,
        sub_threshold: n < required,
        c_star: prep.c_star,
        constants: report.constants,
        report,
    })
}
