mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skippy_core::features::{true_modification, FeatureMap};
use skippy_core::learners::{
    eval_learner, filter_g, fitted_q, greedy_improvement_check, opt_learner, run_family,
    run_recursion, CandidateFamily, ExactTargets, FamilySpec, LearnerConfig, LearnerData,
    Provenance, RecursionContext,
};
use skippy_core::mdp::{
    backward_q, concentrability, optimal_q, sample_dataset, Dataset, Policy, StagedMdp,
};
use skippy_core::regression::{Multipliers, Objective};
use skippy_core::skipping::{skippy_optimal_policy, skippy_policy, Modification, SkipWeights};
use skippy_core::Error;

struct Setup {
    mdp: StagedMdp<f64>,
    features: FeatureMap<f64>,
    behavior: Policy<f64>,
    pi_e: Policy<f64>,
    dataset: Dataset<f64>,
    c_star: f64,
}

fn setup(mdp: StagedMdp<f64>, features: FeatureMap<f64>, n: usize, seed: u64) -> Setup {
    let behavior = Policy::uniform(&mdp);
    let pi_e = Policy::random_stochastic(&mdp, &mut rng(seed + 100));
    let dataset = sample_dataset(&mdp, &behavior, n, seed).unwrap();
    let c_star = concentrability(&mdp, &behavior).unwrap().value().unwrap();
    Setup {
        mdp,
        features,
        behavior,
        pi_e,
        dataset,
        c_star,
    }
}

impl Setup {
    fn data(&self, objective: Objective) -> LearnerData<f64> {
        let pi_e = (objective == Objective::Eval).then_some(&self.pi_e);
        LearnerData::from_dataset(&self.mdp, &self.features, &self.dataset, pi_e, true).unwrap()
    }

    fn config(&self, alpha: Option<f64>, multipliers: Multipliers) -> LearnerConfig<f64> {
        let h = self.mdp.horizon() as f64;
        LearnerConfig {
            eps: 0.1,
            delta: 0.1,
            alpha,
            multipliers,
            l2: h * (self.features.dim() as f64).sqrt(),
            concentrability: self.c_star,
        }
    }
}

fn zero_beta() -> Multipliers {
    Multipliers {
        beta: 0.0,
        ..Multipliers::default()
    }
}

fn gap(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
    a.iter()
        .flatten()
        .flatten()
        .zip(b.iter().flatten().flatten())
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

fn tabular_setup(seed: u64, n: usize) -> Setup {
    let mdp = random_mdp(seed, 3, 2, 2);
    let features = tabular(&mdp);
    setup(mdp, features, n, seed)
}

#[test]
fn exact_evaluation_chain_is_the_skippy_policy_value() {
    let s = tabular_setup(3, 2048);
    let data = s.data(Objective::Eval);
    let cfg = s.config(Some(1e-3), zero_beta());
    let consts = cfg.constants(&data, Objective::Eval).unwrap();
    let family = CandidateFamily::build(
        &FamilySpec {
            oracle: false,
            perturbed: 0,
            random: 2,
            no_skip: true,
        },
        None,
        3,
        s.features.dim(),
        consts.d0,
        cfg.l2,
        consts.alpha,
        9,
    )
    .unwrap();
    let oracle = ExactTargets::new(&s.mdp, &s.features, &s.dataset, Some(&s.pi_e)).unwrap();
    let ctx = RecursionContext::new(&data, Objective::Eval, consts)
        .unwrap()
        .with_oracle(&oracle);
    for (g, _) in family.members() {
        let rec = run_recursion(&ctx, g).unwrap();
        let skip = SkipWeights::compute(&s.mdp, &s.features, g);
        let truth = backward_q(&s.mdp, &skippy_policy(&s.pi_e, &s.behavior, &skip)).unwrap();
        let learned = rec.q_tables(&s.mdp, &s.features);
        assert!(
            gap(&learned, &truth.q) <= 1e-6,
            "gap {}",
            gap(&learned, &truth.q)
        );
        assert!(rec.max_width() <= 1e-12);
    }
    let out = eval_learner(&data, &cfg, &family, Some(&oracle)).unwrap();
    let g = family.get(out.report.chosen);
    let skip = SkipWeights::compute(&s.mdp, &s.features, g);
    let v = backward_q(&s.mdp, &skippy_policy(&s.pi_e, &s.behavior, &skip))
        .unwrap()
        .start_value();
    assert!((out.value - v).abs() <= 1e-6);
}

#[test]
fn exact_optimization_chain_is_the_skippy_optimal_value() {
    let s = tabular_setup(4, 2048);
    let data = s.data(Objective::Opt);
    let cfg = s.config(Some(1e-3), zero_beta());
    let consts = cfg.constants(&data, Objective::Opt).unwrap();
    let g = true_modification(&s.mdp, &s.features, consts.alpha)
        .unwrap()
        .modification;
    let oracle = ExactTargets::new(&s.mdp, &s.features, &s.dataset, None).unwrap();
    let ctx = RecursionContext::new(&data, Objective::Opt, consts)
        .unwrap()
        .with_oracle(&oracle);
    let rec = run_recursion(&ctx, &g).unwrap();
    let skip = SkipWeights::compute(&s.mdp, &s.features, &g);
    let (_, truth) = skippy_optimal_policy(&s.mdp, &s.behavior, &skip).unwrap();
    let worst = gap(&rec.q_tables(&s.mdp, &s.features), &truth.q);
    assert!(worst <= 1e-6, "gap {worst}");
}

#[test]
fn no_skip_recursion_is_fitted_q() {
    let mdp = random_mdp(5, 3, 3, 2);
    let features = random_features(&mdp, 3, 5);
    let s = setup(mdp, features, 512, 5);
    for objective in [Objective::Eval, Objective::Opt] {
        let data = s.data(objective);
        let consts = s
            .config(None, Multipliers::default())
            .constants(&data, objective)
            .unwrap();
        let ctx = RecursionContext::new(&data, objective, consts).unwrap();
        let rec = run_recursion(&ctx, &Modification::no_skip(consts.alpha, 3)).unwrap();
        let fq = fitted_q(&ctx).unwrap();
        for (a, b) in rec.thetas.iter().zip(&fq.thetas) {
            assert!((a - b).amax() <= 1e-9);
        }
        assert_eq!(rec.start_q, fq.start_q);
    }
}

#[test]
fn zero_radius_accepts_every_candidate() {
    let s = tabular_setup(6, 256);
    let data = s.data(Objective::Eval);
    let cfg = s.config(None, zero_beta());
    let consts = cfg.constants(&data, Objective::Eval).unwrap();
    assert_eq!(consts.beta, 0.0);
    let g = true_modification(&s.mdp, &s.features, 1.0)
        .unwrap()
        .modification;
    let family = CandidateFamily::build(
        &FamilySpec::default(),
        Some(&g),
        3,
        s.features.dim(),
        consts.d0,
        cfg.l2,
        consts.alpha,
        1,
    )
    .unwrap();
    let out = eval_learner(&data, &cfg, &family, None).unwrap();
    assert_eq!(out.report.accepted, (0..family.len()).collect::<Vec<_>>());
    assert!(out.report.candidates.iter().all(|c| c.max_width == 0.0));
}

#[test]
fn zero_threshold_with_positive_radius_empties_the_filter() {
    let s = tabular_setup(7, 128);
    let data = s.data(Objective::Eval);
    let cfg = s.config(
        None,
        Multipliers {
            eps_bar: 0.0,
            ..Multipliers::default()
        },
    );
    let consts = cfg.constants(&data, Objective::Eval).unwrap();
    let family = CandidateFamily::new(vec![
        (Modification::no_skip(consts.alpha, 3), Provenance::NoSkip),
        (Modification::no_skip(consts.alpha, 3), Provenance::User),
    ])
    .unwrap();
    match eval_learner(&data, &cfg, &family, None) {
        Err(Error::EmptyFilter {
            worst_widths,
            threshold,
        }) => {
            assert_eq!(worst_widths.len(), 2);
            assert!(worst_widths.iter().all(|w| *w > 0.0));
            assert_eq!(threshold, 0.0);
        }
        other => panic!("expected an empty filter, got {:?}", other.map(|o| o.value)),
    }
    let ctx = RecursionContext::new(&data, Objective::Eval, consts).unwrap();
    let recs = run_family(&ctx, &family).unwrap();
    let widest = recs.iter().map(|r| r.max_width()).fold(0.0, f64::max);
    assert_eq!(filter_g(&recs, widest).unwrap(), vec![0, 1]);
}

#[test]
fn evaluation_needs_both_policies() {
    let s = tabular_setup(8, 64);
    let blind =
        LearnerData::from_dataset(&s.mdp, &s.features, &s.dataset, Some(&s.pi_e), false).unwrap();
    let cfg = s.config(None, Multipliers::default());
    let family =
        CandidateFamily::new(vec![(Modification::no_skip(1.0, 3), Provenance::NoSkip)]).unwrap();
    assert!(matches!(
        eval_learner(&blind, &cfg, &family, None),
        Err(Error::Config(_))
    ));
    let no_target = s.data(Objective::Opt);
    let consts = cfg.constants(&no_target, Objective::Eval).unwrap();
    assert!(matches!(
        RecursionContext::new(&no_target, Objective::Eval, consts),
        Err(Error::Config(_))
    ));
}

#[test]
fn mismatched_alpha_is_rejected() {
    let s = tabular_setup(9, 64);
    let data = s.data(Objective::Opt);
    let cfg = s.config(Some(0.5), Multipliers::default());
    let family =
        CandidateFamily::new(vec![(Modification::no_skip(0.25, 3), Provenance::NoSkip)]).unwrap();
    assert!(matches!(
        opt_learner(&data, &cfg, &family, None),
        Err(Error::Config(_))
    ));
    let mixed = CandidateFamily::new(vec![
        (Modification::no_skip(0.25, 3), Provenance::NoSkip),
        (Modification::no_skip(0.5, 3), Provenance::User),
    ]);
    assert!(mixed.is_err());
    assert!(CandidateFamily::<f64>::new(Vec::new()).is_err());
}

#[test]
fn zero_rewards_learn_nothing() {
    let base = random_mdp(10, 3, 2, 2);
    let zeros = base
        .rewards()
        .iter()
        .map(|st| st.iter().map(|r| vec![0.0; r.len()]).collect())
        .collect();
    let mdp = base.with_rewards(zeros).unwrap();
    let features = tabular(&mdp);
    let s = setup(mdp, features, 256, 10);
    let data = s.data(Objective::Opt);
    let cfg = s.config(None, Multipliers::default());
    let family = CandidateFamily::new(vec![(
        Modification::no_skip(cfg.constants(&data, Objective::Opt).unwrap().alpha, 3),
        Provenance::NoSkip,
    )])
    .unwrap();
    let out = opt_learner(&data, &cfg, &family, None).unwrap();
    assert_eq!(out.start_value, 0.0);
    assert!(out.recursion.thetas.iter().all(|t| t.amax() == 0.0));
    let pi = out.policy(&s.mdp, &s.features);
    assert_eq!(backward_q(&s.mdp, &pi).unwrap().start_value(), 0.0);
}

#[test]
fn fig1_optimization_and_evaluation() {
    let (mdp, features) = fig1();
    let s = setup(mdp, features, 8192, 11);
    let pi_up = up(&s.mdp);
    let data =
        LearnerData::from_dataset(&s.mdp, &s.features, &s.dataset, Some(&pi_up), true).unwrap();
    let cfg = s.config(None, Multipliers::default());
    for objective in [Objective::Eval, Objective::Opt] {
        let consts = cfg.constants(&data, objective).unwrap();
        let g = true_modification(&s.mdp, &s.features, consts.alpha)
            .unwrap()
            .modification;
        let family = CandidateFamily::build(
            &FamilySpec::default(),
            Some(&g),
            2,
            1,
            consts.d0,
            cfg.l2,
            consts.alpha,
            3,
        )
        .unwrap();
        match objective {
            Objective::Eval => {
                let out = eval_learner(&data, &cfg, &family, None).unwrap();
                assert!((out.value - 1.0).abs() <= 0.05, "v̂ = {}", out.value);
            }
            Objective::Opt => {
                let out = opt_learner(&data, &cfg, &family, None).unwrap();
                let v = backward_q(&s.mdp, &out.policy(&s.mdp, &s.features))
                    .unwrap()
                    .start_value();
                assert!((v - 1.0).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn evaluating_the_behavior_policy_ignores_skipping() {
    let s = tabular_setup(12, 512);
    let data = LearnerData::from_dataset(&s.mdp, &s.features, &s.dataset, Some(&s.behavior), true)
        .unwrap();
    let cfg = s.config(Some(0.5), Multipliers::default());
    let consts = cfg.constants(&data, Objective::Eval).unwrap();
    let ctx = RecursionContext::new(&data, Objective::Eval, consts).unwrap();
    let fq = fitted_q(&ctx).unwrap();
    let g = true_modification(&s.mdp, &s.features, consts.alpha)
        .unwrap()
        .modification;
    let family = CandidateFamily::build(
        &FamilySpec::default(),
        Some(&g),
        3,
        s.features.dim(),
        consts.d0,
        cfg.l2,
        consts.alpha,
        4,
    )
    .unwrap();
    let out = eval_learner(&data, &cfg, &family, None).unwrap();
    let fqe_value: f64 = s
        .behavior
        .row(0, 0)
        .iter()
        .zip(&fq.start_q)
        .map(|(p, q)| p * q)
        .sum();
    assert!((out.value - fqe_value).abs() <= 1e-9);
    assert!(out.report.candidates.iter().all(|c| c.score == Some(0.0)));
}

#[test]
fn design_basis_candidate_recovers_the_optimal_policy() {
    let s = tabular_setup(13, 8192);
    let data = s.data(Objective::Opt);
    let cfg = s.config(Some(1e-3), Multipliers::default());
    let consts = cfg.constants(&data, Objective::Opt).unwrap();
    let g = true_modification(&s.mdp, &s.features, consts.alpha)
        .unwrap()
        .modification;
    let family = CandidateFamily::new(vec![(g, Provenance::Oracle)]).unwrap();
    let out = opt_learner(&data, &cfg, &family, None).unwrap();
    let v = backward_q(&s.mdp, &out.policy(&s.mdp, &s.features))
        .unwrap()
        .start_value();
    let v_star = optimal_q(&s.mdp).0.start_value();
    assert!(v_star - v <= 1e-9, "suboptimality {}", v_star - v);
}

#[test]
fn greedy_policies_of_perturbed_values_lose_little() {
    let mdp = random_mdp(14, 4, 3, 3);
    let (q_star, pi_star) = optimal_q(&mdp);
    let mut r = ChaCha8Rng::seed_from_u64(14);
    for kappa in [0.0, 0.1, 0.5] {
        let noisy: Vec<Vec<Vec<f64>>> = q_star
            .q
            .iter()
            .map(|st| {
                st.iter()
                    .map(|row| {
                        row.iter()
                            .map(|x| x + kappa * (2.0 * r.random::<f64>() - 1.0))
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let check = greedy_improvement_check(&mdp, &pi_star, &noisy, kappa, 50, 15).unwrap();
        assert!(
            check.holds(),
            "κ = {kappa}: worst margin {}",
            check.worst_margin
        );
        if kappa == 0.0 {
            assert!(check.worst_margin.abs() <= 1e-9);
        }
    }
}

#[test]
fn learners_are_deterministic() {
    let s = tabular_setup(16, 512);
    let data = s.data(Objective::Eval);
    let cfg = s.config(None, Multipliers::default());
    let consts = cfg.constants(&data, Objective::Eval).unwrap();
    let g = true_modification(&s.mdp, &s.features, consts.alpha)
        .unwrap()
        .modification;
    let family = CandidateFamily::build(
        &FamilySpec::default(),
        Some(&g),
        3,
        s.features.dim(),
        consts.d0,
        cfg.l2,
        consts.alpha,
        5,
    )
    .unwrap();
    let a = eval_learner(&data, &cfg, &family, None).unwrap();
    let b = eval_learner(&data, &cfg, &family, None).unwrap();
    assert_eq!(a.value.to_bits(), b.value.to_bits());
    assert_eq!(
        serde_json::to_string(&a.report).unwrap(),
        serde_json::to_string(&b.report).unwrap()
    );
}

#[test]
fn family_specs_parse_and_print() {
    let spec: FamilySpec = "oracle,perturbed:3,random:3,noskip".parse().unwrap();
    assert_eq!(spec, FamilySpec::default());
    assert_eq!(spec.size(), 8);
    assert_eq!(spec.to_string().parse::<FamilySpec>().unwrap(), spec);
    let only: FamilySpec = " random:2 ".parse().unwrap();
    assert_eq!((only.oracle, only.random, only.no_skip), (false, 2, false));
    for bad in ["", "bogus", "random:x", "random:0"] {
        assert!(bad.parse::<FamilySpec>().is_err(), "{bad}");
    }
}

#[test]
fn built_families_follow_the_spec() {
    let mdp = random_mdp(17, 3, 2, 2);
    let features = tabular(&mdp);
    let g = true_modification(&mdp, &features, 1.0)
        .unwrap()
        .modification;
    let l2 = 2.0;
    let family =
        CandidateFamily::build(&FamilySpec::default(), Some(&g), 3, 4, 3, l2, 0.7, 8).unwrap();
    let kinds: Vec<Provenance> = family.members().iter().map(|(_, p)| *p).collect();
    use Provenance::*;
    assert_eq!(
        kinds,
        vec![Oracle, Perturbed, Perturbed, Perturbed, Random, Random, Random, NoSkip]
    );
    assert_eq!(family.alpha(), 0.7);
    for (m, p) in family.members() {
        assert_eq!(m.alpha, 0.7);
        if matches!(p, Perturbed | Random) {
            assert!(m.max_norm() <= l2 * (1.0 + 1e-12));
        }
        if *p == Random {
            assert!(m.per_stage.iter().all(|pts| pts.len() == 3));
        }
    }
    assert!(family.get(7).no_skip);
    let again =
        CandidateFamily::build(&FamilySpec::default(), Some(&g), 3, 4, 3, l2, 0.7, 8).unwrap();
    for ((a, _), (b, _)) in family.members().iter().zip(again.members()) {
        assert_eq!(a.per_stage, b.per_stage);
    }
    assert!(matches!(
        CandidateFamily::build(&FamilySpec::default(), None, 3, 4, 3, l2, 0.7, 8),
        Err(Error::Config(_))
    ));
}
