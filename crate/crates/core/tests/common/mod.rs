#![allow(dead_code)]

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skippy_core::features::FeatureMap;
use skippy_core::mdp::{Policy, RewardKind, StagedMdp};

pub fn stage_ids(sizes: &[usize]) -> Vec<Vec<usize>> {
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

/// Two-stage example: up (action 0) pays 1 then 0, down pays 0.5 then 0.5.
pub fn fig1() -> (StagedMdp<f64>, FeatureMap<f64>) {
    let transitions = vec![
        vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]],
        vec![vec![vec![1.0]; 2], vec![vec![1.0]; 2]],
    ];
    let rewards = vec![vec![vec![1.0, 0.5]], vec![vec![0.0, 0.0], vec![0.5, 0.5]]];
    let mdp = StagedMdp::new(
        2,
        stage_ids(&[1, 2, 1]),
        2,
        transitions,
        rewards,
        RewardKind::Deterministic,
    )
    .unwrap();
    let phi = vec![
        vec![vec![vec![1.0]; 2]],
        vec![vec![vec![0.0]; 2], vec![vec![0.5]; 2]],
        vec![vec![vec![0.0]; 2]],
    ];
    let features = FeatureMap::from_vectors(&mdp, 1, phi).unwrap();
    (mdp, features)
}

pub fn up(mdp: &StagedMdp<f64>) -> Policy<f64> {
    Policy::constant(mdp, 0).unwrap()
}

pub fn down(mdp: &StagedMdp<f64>) -> Policy<f64> {
    Policy::constant(mdp, 1).unwrap()
}

/// Stage-`k` state `i` goes to state `i` of stage `k + 1` under action 0 and
/// to the last state otherwise; one state per stage when `width == 1`.
pub fn chain(horizon: usize, actions: usize) -> StagedMdp<f64> {
    let mut sizes = vec![1];
    sizes.extend(std::iter::repeat_n(2, horizon - 1));
    sizes.push(1);
    let mut transitions = Vec::new();
    let mut rewards = Vec::new();
    for k in 0..horizon {
        let next = sizes[k + 1];
        let mut tk = Vec::new();
        let mut rk = Vec::new();
        for i in 0..sizes[k] {
            tk.push(
                (0..actions)
                    .map(|a| {
                        let mut p = vec![0.0; next];
                        p[if next == 1 || (i == 0 && a == 0) {
                            0
                        } else {
                            next - 1
                        }] = 1.0;
                        p
                    })
                    .collect(),
            );
            rk.push(
                (0..actions)
                    .map(|a| {
                        if i == 0 && a == 0 && k + 1 == horizon {
                            1.0
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
        }
        transitions.push(tk);
        rewards.push(rk);
    }
    StagedMdp::new(
        horizon,
        stage_ids(&sizes),
        actions,
        transitions,
        rewards,
        RewardKind::Deterministic,
    )
    .unwrap()
}

fn simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>() + 0.05).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

/// Random dynamics with full support and rewards in `[0, 1]`.
pub fn random_mdp(seed: u64, horizon: usize, width: usize, actions: usize) -> StagedMdp<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![1];
    sizes.extend(std::iter::repeat_n(width, horizon - 1));
    sizes.push(1);
    let transitions = (0..horizon)
        .map(|k| {
            (0..sizes[k])
                .map(|_| {
                    (0..actions)
                        .map(|_| simplex(sizes[k + 1], &mut rng))
                        .collect()
                })
                .collect()
        })
        .collect();
    let rewards = (0..horizon)
        .map(|k| {
            (0..sizes[k])
                .map(|_| (0..actions).map(|_| rng.random::<f64>()).collect())
                .collect()
        })
        .collect();
    StagedMdp::new(
        horizon,
        stage_ids(&sizes),
        actions,
        transitions,
        rewards,
        RewardKind::Deterministic,
    )
    .unwrap()
}

/// One-hot features over `(state index, action)` pairs; realizes every q-function.
pub fn tabular(mdp: &StagedMdp<f64>) -> FeatureMap<f64> {
    let width = (0..=mdp.horizon()).map(|k| mdp.stage_len(k)).max().unwrap();
    let a_count = mdp.actions();
    let dim = width * a_count;
    let phi = (0..=mdp.horizon())
        .map(|k| {
            (0..mdp.stage_len(k))
                .map(|i| {
                    (0..a_count)
                        .map(|a| {
                            let mut v = vec![0.0; dim];
                            if k < mdp.horizon() {
                                v[i * a_count + a] = 1.0;
                            }
                            v
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    FeatureMap::from_vectors(mdp, dim, phi).unwrap()
}

/// Random dense features, not necessarily realizable.
pub fn random_features(mdp: &StagedMdp<f64>, dim: usize, seed: u64) -> FeatureMap<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phi = (0..=mdp.horizon())
        .map(|k| {
            (0..mdp.stage_len(k))
                .map(|_| {
                    (0..mdp.actions())
                        .map(|_| {
                            if k < mdp.horizon() {
                                (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()
                            } else {
                                vec![0.0; dim]
                            }
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    FeatureMap::from_vectors(mdp, dim, phi).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn unit(d: usize, i: usize) -> DVector<f64> {
    let mut v = DVector::zeros(d);
    v[i] = 1.0;
    v
}

pub fn max_gap(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}
