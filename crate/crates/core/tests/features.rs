mod common;

use common::*;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;
use skippy_core::features::{
    audit_realizability, build_design, design_size, exact_range, exact_ranges, fit_theta,
    point_range, range_g, true_modification,
};
use skippy_core::mdp::{backward_q, for_each_deterministic_policy, Policy, StagedMdp};
use skippy_core::skipping::Modification;

/// Largest action gap over all deterministic policies, by brute force.
fn brute_force_ranges(mdp: &StagedMdp<f64>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = (0..mdp.horizon())
        .map(|k| vec![0.0; mdp.stage_len(k)])
        .collect();
    for_each_deterministic_policy(mdp, |pi| {
        let q = backward_q(mdp, pi).unwrap().q;
        for (k, stage) in out.iter_mut().enumerate() {
            for (i, r) in stage.iter_mut().enumerate() {
                let row = &q[k][i];
                let gap = row.iter().cloned().fold(f64::MIN, f64::max)
                    - row.iter().cloned().fold(f64::MAX, f64::min);
                *r = r.max(gap);
            }
        }
    })
    .unwrap();
    out
}

#[test]
fn fig1_stage_parameter_is_one() {
    let (mdp, features) = fig1();
    for_each_deterministic_policy(&mdp, |pi| {
        let fit = fit_theta(&mdp, &features, pi).unwrap();
        assert!((fit.thetas[0][0] - 1.0).abs() < 1e-12);
        assert!(fit.max_residual() < 1e-12);
    })
    .unwrap();
}

#[test]
fn zero_rewards_fit_zero_parameters() {
    let mdp = random_mdp(2, 3, 2, 2);
    let zero = mdp
        .with_rewards(
            vec![vec![vec![0.0; 2]; 2]; 4]
                .into_iter()
                .enumerate()
                .map(|(k, s)| s[..mdp.stage_len(k)].to_vec())
                .collect(),
        )
        .unwrap();
    let features = random_features(&zero, 3, 1);
    let fit = fit_theta(&zero, &features, &Policy::uniform(&zero)).unwrap();
    assert!(fit.thetas.iter().all(|t| t.amax() == 0.0));
    assert_eq!(fit.max_residual(), 0.0);
}

#[test]
fn tabular_features_realize_random_policies() {
    let mdp = random_mdp(5, 3, 3, 2);
    let features = tabular(&mdp);
    let mut r = rng(0);
    for _ in 0..100 {
        let pi = Policy::random_stochastic(&mdp, &mut r);
        assert!(fit_theta(&mdp, &features, &pi).unwrap().max_residual() <= 1e-8);
    }
    assert!(audit_realizability(&mdp, &features).unwrap().passes());
}

#[test]
fn rank_deficient_fits_are_flagged() {
    let (mdp, features) = fig1();
    let fit = fit_theta(&mdp, &features, &up(&mdp)).unwrap();
    // The terminal stage has only zero features.
    assert_eq!(fit.degenerate.len(), mdp.horizon() + 1);
    assert!(fit.degenerate[mdp.horizon()]);
    let mdp = random_mdp(3, 2, 2, 2);
    let wide = random_features(&mdp, 6, 4);
    let fit = fit_theta(&mdp, &wide, &Policy::uniform(&mdp)).unwrap();
    assert!(fit.degenerate[0]);
}

#[test]
fn fig1_start_range_is_zero() {
    let (mdp, _) = fig1();
    assert_eq!(exact_range(&mdp, 0).unwrap(), 0.0);
}

#[test]
fn range_of_last_stage_state_is_its_reward_gap() {
    let mdp = chain(1, 2);
    let mdp = mdp.with_rewards(vec![vec![vec![1.0, 0.0]]]).unwrap();
    assert_eq!(exact_range(&mdp, 0).unwrap(), 1.0);
}

#[test]
fn exact_ranges_match_a_second_brute_force() {
    for s in 0..10 {
        let mdp = random_mdp(40 + s, 3, 2, 2);
        let fast = exact_ranges(&mdp).unwrap();
        let slow = brute_force_ranges(&mdp);
        assert!(max_gap(&fast[..3], &slow) < 1e-12);
    }
}

#[test]
fn stochastic_policies_never_exceed_the_deterministic_range() {
    let mdp = random_mdp(77, 3, 2, 2);
    let ranges = exact_ranges(&mdp).unwrap();
    let mut r = rng(1);
    for _ in 0..200 {
        let q = backward_q(&mdp, &Policy::random_stochastic(&mdp, &mut r))
            .unwrap()
            .q;
        for k in 0..3 {
            for (i, row) in q[k].iter().enumerate() {
                assert!((row[0] - row[1]).abs() <= ranges[k][i] + 1e-12);
            }
        }
    }
}

#[test]
fn orthonormal_design_is_uniform() {
    let d = 4;
    let cands: Vec<DVector<f64>> = (0..d).map(|i| unit(d, i)).collect();
    let design = build_design(&cands, design_size(d)).unwrap();
    assert_eq!(design.points.len(), d);
    for w in &design.weights {
        assert!((w - 0.25).abs() < 1e-6);
    }
    for c in &cands {
        assert!((design.audit(c).0 - d as f64).abs() < 1e-4);
    }
}

#[test]
fn repeated_candidate_gives_one_point() {
    let u: DVector<f64> = DVector::from_vec(vec![0.3, -0.4, 1.2]);
    let design = build_design(&vec![u.clone(); 5], 16).unwrap();
    assert_eq!(design.points.len(), 1);
    assert!((design.audit(&u).0 - 1.0).abs() < 1e-9);
}

#[test]
fn random_unit_candidates_are_certified() {
    let mut r = rng(7);
    let cands: Vec<DVector<f64>> = (0..200)
        .map(|_| {
            let v = DVector::from_fn(4, |_, _| r.sample::<f64, _>(StandardNormal));
            v.normalize()
        })
        .collect();
    let design = build_design(&cands, design_size(4)).unwrap();
    assert!(design.worst_ratio <= 8.0);
    assert!(design.points.len() <= design_size(4));
    assert!(cands.iter().all(|c| design.certifies(c)));
    let total: f64 = design.weights.iter().sum();
    assert!((total - 1.0).abs() < 1e-12);
}

#[test]
fn design_size_floors_the_double_log() {
    assert_eq!(design_size(1), 16);
    assert_eq!(design_size(3), 16 + (12.0 * 3f64.ln().ln()).ceil() as usize);
    assert_eq!(design_size(2), 16);
}

#[test]
fn zero_point_gives_zero_range() {
    let mdp = random_mdp(1, 3, 3, 3);
    let features = random_features(&mdp, 3, 2);
    let g = Modification::new(1.0, vec![vec![DVector::zeros(3)]; 3]).unwrap();
    for k in 0..3 {
        for i in 0..mdp.stage_len(k) {
            assert_eq!(range_g(&features, &g, k, i), 0.0);
        }
    }
}

#[test]
fn fig1_start_state_has_zero_parametric_range() {
    let (_, features) = fig1();
    let g = Modification::new(
        1.0,
        vec![vec![DVector::from_vec(vec![5.0]), DVector::from_vec(vec![-2.0])]; 2],
    )
    .unwrap();
    assert_eq!(range_g(&features, &g, 0, 0), 0.0);
}

#[test]
fn parametric_range_matches_a_loop() {
    let mdp = random_mdp(9, 3, 3, 3);
    let features = random_features(&mdp, 4, 3);
    let mut r = rng(5);
    let pts: Vec<DVector<f64>> = (0..3)
        .map(|_| DVector::from_fn(4, |_, _| r.random::<f64>() - 0.5))
        .collect();
    let g = Modification::new(1.0, vec![pts.clone(); 3]).unwrap();
    for k in 0..3 {
        for i in 0..mdp.stage_len(k) {
            let mut best: f64 = 0.0;
            for p in &pts {
                for a in 0..3 {
                    for b in 0..3 {
                        best = best.max((features.phi(k, i, a) - features.phi(k, i, b)).dot(p));
                    }
                }
            }
            assert!((range_g(&features, &g, k, i) - best).abs() < 1e-12);
        }
    }
}

#[test]
fn fig1_design_basis_is_the_unit_parameter() {
    let (mdp, features) = fig1();
    let g = true_modification(&mdp, &features, 1.0).unwrap();
    assert_eq!(
        g.modification.per_stage[0],
        vec![DVector::from_vec(vec![1.0])]
    );
}

#[test]
fn shared_q_function_gives_a_single_point() {
    let mdp = chain(3, 1);
    let features = tabular(&mdp);
    let g = true_modification(&mdp, &features, 1.0).unwrap();
    assert!(g.modification.per_stage.iter().all(|s| s.len() == 1));
}

#[test]
fn design_basis_range_bounds_the_true_range() {
    for s in 0..6 {
        let mdp = random_mdp(60 + s, 3, 2, 2);
        let features = tabular(&mdp);
        let tm = true_modification(&mdp, &features, 1.0).unwrap();
        let ranges = exact_ranges(&mdp).unwrap();
        let scale = (2.0 * features.dim() as f64).sqrt();
        for (k, stage) in ranges.iter().enumerate().take(3) {
            for (i, range) in stage.iter().enumerate() {
                assert!(*range <= scale * range_g(&features, &tm.modification, k, i) + 1e-8);
            }
        }
        // The certificate also covers stochastic policies.
        let mut r = rng(s);
        for _ in 0..200 {
            let fit = fit_theta(&mdp, &features, &Policy::random_stochastic(&mdp, &mut r)).unwrap();
            for (design, t) in tm.designs.iter().zip(&fit.thetas) {
                assert!(design.certifies(t));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adding_points_never_shrinks_range(seed in 0u64..10_000, extra in 1usize..4) {
        let mdp = random_mdp(seed, 2, 3, 3);
        let features = random_features(&mdp, 3, seed);
        let mut r = rng(seed);
        let mut pts: Vec<DVector<f64>> = vec![DVector::from_fn(3, |_, _| r.random::<f64>() - 0.5)];
        let small = point_range(&pts, features.state_matrix(1, 0));
        for _ in 0..extra {
            pts.push(DVector::from_fn(3, |_, _| r.random::<f64>() - 0.5));
        }
        prop_assert!(point_range(&pts, features.state_matrix(1, 0)) >= small);
        prop_assert!(small >= 0.0);
    }
}
