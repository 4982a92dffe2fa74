mod common;

use common::*;
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;
use skippy_core::features::true_modification;
use skippy_core::mdp::{backward_q, optimal_q, Policy, StagedMdp, Step, Trajectory};
use skippy_core::skipping::{
    exact_t_g, exact_t_pi_g, exact_t_pi_g_without_stop_factor, g_target, g_target_on_trajectory,
    omega, omega_from_range, skippy_optimal_policy, skippy_policy, stop_distribution, Continuation,
    Modification, SkipWeights, StagedQ,
};

fn random_skip(mdp: &StagedMdp<f64>, seed: u64) -> SkipWeights<f64> {
    let mut r = rng(seed);
    let h = mdp.horizon();
    let tables = (0..=h)
        .map(|k| {
            (0..mdp.stage_len(k))
                .map(|_| match (k == h, r.random_range(0..3)) {
                    (true, _) => 0.0,
                    (_, 0) => 0.0,
                    (_, 1) => 1.0,
                    _ => r.random::<f64>(),
                })
                .collect()
        })
        .collect();
    SkipWeights::from_tables(mdp, tables).unwrap()
}

fn random_future(mdp: &StagedMdp<f64>, k: usize, seed: u64) -> StagedQ<f64> {
    let mut r = rng(seed);
    let h = mdp.horizon();
    let tables = (k + 1..=h)
        .map(|u| {
            (0..mdp.stage_len(u))
                .map(|_| {
                    (0..mdp.actions())
                        .map(|_| {
                            if u == h {
                                0.0
                            } else {
                                h as f64 * r.random::<f64>()
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    StagedQ::new(mdp, k + 1, tables).unwrap()
}

/// Classical backup `r + E[c(S′)]` with `c` the collapsed next-stage values.
fn classical(
    mdp: &StagedMdp<f64>,
    q: &StagedQ<f64>,
    k: usize,
    cont: impl Fn(usize, &[f64]) -> f64,
) -> Vec<Vec<f64>> {
    let next: Vec<f64> = q
        .stage(k + 1)
        .iter()
        .enumerate()
        .map(|(i, row)| cont(i, row))
        .collect();
    (0..mdp.stage_len(k))
        .map(|i| {
            (0..mdp.actions())
                .map(|a| mdp.reward(k, i, a) + mdp.expect_next(k, i, a, &next))
                .collect()
        })
        .collect()
}

#[test]
fn omega_examples() {
    let (mdp, features) = fig1();
    let g = Modification::new(0.3, vec![vec![DVector::from_vec(vec![1.0])]; 2]).unwrap();
    // Terminal state.
    assert_eq!(omega(&features, &g, 2, 0), 0.0);
    // Zero range.
    assert_eq!(omega(&features, &g, 0, 0), 1.0);
    let alpha = 0.4;
    let d = 3;
    let r = 0.75 * alpha / (2.0 * d as f64).sqrt();
    assert!((omega_from_range(r, alpha, d) - 0.5).abs() < 1e-12);
    assert_eq!(omega_from_range(alpha, alpha, d), 0.0);
    let skip = SkipWeights::compute(&mdp, &features, &g);
    assert_eq!(skip.get(2, 0), 0.0);
}

#[test]
fn no_skip_sentinel_never_skips() {
    let (mdp, features) = fig1();
    let skip = SkipWeights::compute(&mdp, &features, &Modification::no_skip(1.0, 2));
    assert!(skip.omega.iter().flatten().all(|w| *w == 0.0));
}

#[test]
fn stop_distribution_examples() {
    assert_eq!(stop_distribution(&[0.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0]);
    assert_eq!(stop_distribution(&[1.0, 0.0, 0.0]), vec![0.0, 1.0, 0.0]);
    assert_eq!(stop_distribution(&[0.5, 0.5, 0.0]), vec![0.5, 0.25, 0.25]);
}

#[test]
fn skippy_policy_examples() {
    let (mdp, _) = fig1();
    let b = Policy::uniform(&mdp);
    let pi = up(&mdp);
    assert_eq!(
        skippy_policy(&pi, &b, &SkipWeights::constant(&mdp, 0.0)).tables(),
        pi.tables()
    );
    let all = skippy_policy(&pi, &b, &SkipWeights::constant(&mdp, 1.0));
    assert_eq!(&all.tables()[..2], &b.tables()[..2]);
    let half = SkipWeights::from_tables(&mdp, vec![vec![0.5], vec![0.0, 0.0], vec![0.0]]).unwrap();
    assert_eq!(skippy_policy(&pi, &b, &half).row(0, 0), &[0.75, 0.25]);
}

#[test]
fn skippy_optimal_policy_reduces_to_the_extremes() {
    let mdp = random_mdp(3, 4, 3, 2);
    let b = Policy::random_stochastic(&mdp, &mut rng(1));
    let (pi, q) = skippy_optimal_policy(&mdp, &b, &SkipWeights::constant(&mdp, 0.0)).unwrap();
    let (q_star, pi_star) = optimal_q(&mdp);
    assert!(max_gap(&q.q.concat(), &q_star.q.concat()) < 1e-12);
    assert_eq!(&pi.tables()[..4], &pi_star.tables()[..4]);
    let (pi, q) = skippy_optimal_policy(&mdp, &b, &SkipWeights::constant(&mdp, 1.0)).unwrap();
    let q_b = backward_q(&mdp, &b).unwrap();
    assert!(max_gap(&q.q.concat(), &q_b.q.concat()) < 1e-12);
    assert_eq!(&pi.tables()[..4], &b.tables()[..4]);
}

#[test]
fn fig1_skipping_the_start_under_down_behavior_is_worth_one() {
    let (mdp, _) = fig1();
    let skip = SkipWeights::from_tables(&mdp, vec![vec![1.0], vec![0.0, 0.0], vec![0.0]]).unwrap();
    let (pi, q) = skippy_optimal_policy(&mdp, &down(&mdp), &skip).unwrap();
    assert_eq!(q.start_value(), 1.0);
    assert_eq!(pi.row(0, 0), &[0.0, 1.0]);
}

#[test]
fn zero_skipping_gives_classical_operators() {
    let mdp = random_mdp(8, 4, 3, 3);
    let b = Policy::uniform(&mdp);
    let pi = Policy::random_stochastic(&mdp, &mut rng(2));
    let none = SkipWeights::constant(&mdp, 0.0);
    for k in 0..4 {
        let q = random_future(&mdp, k, k as u64);
        let t_pi = exact_t_pi_g(&mdp, &b, &none, &pi, &q, k).unwrap();
        let want = classical(&mdp, &q, k, |i, row| {
            pi.row(k + 1, i).iter().zip(row).map(|(p, x)| p * x).sum()
        });
        assert!(max_gap(&t_pi, &want) < 1e-12);
        let t = exact_t_g(&mdp, &b, &none, &q, k).unwrap();
        let want = classical(&mdp, &q, k, |_, row| {
            row.iter().cloned().fold(f64::MIN, f64::max)
        });
        assert!(max_gap(&t, &want) < 1e-12);
    }
}

#[test]
fn zero_rewards_and_zero_future_back_up_to_zero() {
    let mdp = random_mdp(9, 3, 2, 2);
    let zero = mdp
        .with_rewards(
            mdp.rewards()
                .iter()
                .map(|s| s.iter().map(|r| vec![0.0; r.len()]).collect())
                .collect(),
        )
        .unwrap();
    let q = StagedQ::new(
        &zero,
        1,
        vec![
            vec![vec![0.0; 2]; 2],
            vec![vec![0.0; 2]; 2],
            vec![vec![0.0; 2]],
        ],
    )
    .unwrap();
    let skip = random_skip(&zero, 3);
    let out = exact_t_pi_g(
        &zero,
        &Policy::uniform(&zero),
        &skip,
        &Policy::uniform(&zero),
        &q,
        0,
    )
    .unwrap();
    assert!(out.iter().flatten().all(|x| *x == 0.0));
}

#[test]
fn unclipped_futures_are_rejected() {
    let mdp = random_mdp(9, 3, 2, 2);
    assert!(StagedQ::new(&mdp, 2, vec![vec![vec![3.5, 0.0]; 2], vec![vec![0.0; 2]]]).is_err());
    assert!(StagedQ::new(&mdp, 2, vec![vec![vec![-0.1, 0.0]; 2], vec![vec![0.0; 2]]]).is_err());
    assert!(StagedQ::new(&mdp, 2, vec![vec![vec![1.0, 0.0]; 2], vec![vec![0.2; 2]]]).is_err());
}

#[test]
fn single_action_operators_coincide() {
    let mdp = random_mdp(10, 4, 3, 1);
    let b = Policy::uniform(&mdp);
    let skip = random_skip(&mdp, 4);
    for k in 0..4 {
        let q = random_future(&mdp, k, 20 + k as u64);
        let a = exact_t_g(&mdp, &b, &skip, &q, k).unwrap();
        let c = exact_t_pi_g(&mdp, &b, &skip, &b, &q, k).unwrap();
        assert!(max_gap(&a, &c) < 1e-12);
    }
}

#[test]
fn skippy_values_are_operator_fixed_points() {
    let mut r = rng(5);
    for t in 0..30 {
        let mdp = random_mdp(200 + t, 3 + (t as usize % 2), 3, 2);
        let b = Policy::random_stochastic(&mdp, &mut r);
        let pi = Policy::random_stochastic(&mdp, &mut r);
        let skip = random_skip(&mdp, t);
        let q = backward_q(&mdp, &skippy_policy(&pi, &b, &skip)).unwrap().q;
        let (_, q_opt) = skippy_optimal_policy(&mdp, &b, &skip).unwrap();
        for k in 0..mdp.horizon() {
            let fut = StagedQ::from_full(&mdp, &q, k + 1).unwrap();
            assert!(max_gap(&exact_t_pi_g(&mdp, &b, &skip, &pi, &fut, k).unwrap(), &q[k]) <= 1e-9);
            let fut = StagedQ::from_full(&mdp, &q_opt.q, k + 1).unwrap();
            assert!(max_gap(&exact_t_g(&mdp, &b, &skip, &fut, k).unwrap(), &q_opt.q[k]) <= 1e-9);
        }
    }
}

#[test]
fn dropping_the_stop_factor_breaks_the_fixed_point() {
    let mdp = random_mdp(3, 3, 3, 2);
    let b = Policy::uniform(&mdp);
    let pi = Policy::random_deterministic(&mdp, &mut rng(1));
    let skip = SkipWeights::constant(&mdp, 0.5);
    let q = backward_q(&mdp, &skippy_policy(&pi, &b, &skip)).unwrap().q;
    let fut = StagedQ::from_full(&mdp, &q, 1).unwrap();
    let broken = exact_t_pi_g_without_stop_factor(&mdp, &b, &skip, &pi, &fut, 0).unwrap();
    assert!(max_gap(&broken, &q[0]) > 1e-3);
}

#[test]
fn design_basis_skipping_loses_at_most_h_alpha() {
    let mut r = rng(3);
    for t in 0..6 {
        let mdp = random_mdp(300 + t, 3, 2, 2);
        let features = tabular(&mdp);
        let alpha = [0.05, 0.3, 1.0][t as usize % 3];
        let g = true_modification(&mdp, &features, alpha)
            .unwrap()
            .modification;
        let b = Policy::uniform(&mdp);
        let skip = SkipWeights::compute(&mdp, &features, &g);
        let bound = 3.0 * alpha + 1e-9;
        for _ in 0..50 {
            let pi = Policy::random_stochastic(&mdp, &mut r);
            let v = backward_q(&mdp, &pi).unwrap().start_value();
            let v_g = backward_q(&mdp, &skippy_policy(&pi, &b, &skip))
                .unwrap()
                .start_value();
            assert!((v - v_g).abs() <= bound);
        }
        let (pi_g, _) = skippy_optimal_policy(&mdp, &b, &skip).unwrap();
        let gap = optimal_q(&mdp).0.start_value() - backward_q(&mdp, &pi_g).unwrap().start_value();
        assert!((-1e-9..=bound).contains(&gap));
    }
}

#[test]
fn g_target_examples() {
    // No skipping: one reward plus the next continuation.
    assert_eq!(
        g_target(&[0.3, 0.7, 0.2, 0.0], &[0.0, 0.0, 0.0], &[1.5, 2.0, 0.0]),
        0.3 + 1.5
    );
    // Skip until the terminal state: the plain return.
    assert!(
        (g_target::<f64>(&[0.3, 0.7, 0.2, 0.0], &[1.0, 1.0, 0.0], &[1.5, 2.0, 0.0]) - 1.2).abs()
            < 1e-12
    );
}

fn suffix(
    mdp: &StagedMdp<f64>,
    b: &Policy<f64>,
    k: usize,
    i: usize,
    a: usize,
    r: &mut impl Rng,
) -> Trajectory<f64> {
    let h = mdp.horizon();
    let mut steps: Vec<Step<f64>> = (0..k)
        .map(|u| Step {
            state: mdp.state_id(u, 0),
            action: 0,
            reward: 0.0,
        })
        .collect();
    let (mut i, mut a) = (i, a);
    for u in k..=h {
        steps.push(Step {
            state: mdp.state_id(u, i),
            action: a,
            reward: mdp.reward(u, i, a),
        });
        if u < h {
            i = draw(mdp.transition(u, i, a), r);
            a = draw(b.row(u + 1, i), r);
        }
    }
    Trajectory { steps }
}

fn draw(p: &[f64], r: &mut impl Rng) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (j, x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return j;
        }
    }
    p.len() - 1
}

#[test]
fn sampled_targets_average_to_the_exact_operator() {
    let mut r = rng(77);
    let n = 100_000;
    let probes = 100;
    let mut within_three = 0;
    for t in 0..probes {
        let mdp = random_mdp(500 + t, 3, 2, 2);
        let b = Policy::random_stochastic(&mdp, &mut r);
        let pi = Policy::random_stochastic(&mdp, &mut r);
        let skip = random_skip(&mdp, t);
        let k = r.random_range(0..3);
        let fut = random_future(&mdp, k, t);
        let (i, a) = (r.random_range(0..mdp.stage_len(k)), r.random_range(0..2));
        let exact = exact_t_pi_g(&mdp, &b, &skip, &pi, &fut, k).unwrap()[i][a];
        let (mut s, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let traj = suffix(&mdp, &b, k, i, a, &mut r);
            let y = g_target_on_trajectory(&mdp, &skip, Continuation::Policy(&pi), &fut, &traj, k)
                .unwrap();
            s += y;
            sq += y * y;
        }
        let mean = s / n as f64;
        let sd = ((sq / n as f64 - mean * mean).max(0.0) / n as f64).sqrt();
        let z = (mean - exact).abs() / sd.max(1e-15);
        assert!(
            z <= 4.5 || (mean - exact).abs() < 1e-9,
            "probe {t}: z = {z} mean {mean} exact {exact} sd {sd} k {k}"
        );
        if z <= 3.0 || (mean - exact).abs() < 1e-9 {
            within_three += 1;
        }
    }
    assert!(
        within_three >= 95,
        "{within_three} of {probes} probes within 3σ"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn stop_distribution_sums_to_one(ws in prop::collection::vec(0.0f64..=1.0, 0..6)) {
        let mut ws = ws;
        ws.push(0.0);
        let f = stop_distribution(&ws);
        prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(f.iter().all(|x| *x >= 0.0));
    }

    #[test]
    fn less_skipping_stops_earlier(ws in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..6)) {
        let hi: Vec<f64> = ws.iter().map(|(a, b)| a.max(*b)).chain([0.0]).collect();
        let lo: Vec<f64> = ws.iter().map(|(a, b)| a.min(*b)).chain([0.0]).collect();
        let mean = |f: Vec<f64>| f.iter().enumerate().map(|(t, p)| t as f64 * p).sum::<f64>();
        prop_assert!(mean(stop_distribution(&lo)) <= mean(stop_distribution(&hi)) + 1e-12);
    }

    #[test]
    fn targets_stay_in_zero_to_two_h(len in 1usize..6, seed in 0u64..10_000) {
        let mut r = rng(seed);
        let h = len as f64;
        let rewards: Vec<f64> = (0..=len).map(|t| if t == len { 0.0 } else { r.random::<f64>() }).collect();
        let omegas: Vec<f64> = (0..len).map(|t| if t + 1 == len { 0.0 } else { r.random::<f64>() }).collect();
        let cont: Vec<f64> = (0..len).map(|t| if t + 1 == len { 0.0 } else { h * r.random::<f64>() }).collect();
        let y = g_target(&rewards, &omegas, &cont);
        prop_assert!((0.0..=2.0 * h).contains(&y));
    }
}
