//! Feature maps, realizability audits, exact ranges and near-optimal designs.

use nalgebra::{DMatrix, DVector};

use crate::error::invalid;
use crate::linalg::{MinNormSolver, SymEig};
use crate::mdp::{backward_q, check_enumeration, enumerate_choices, Policy, StagedMdp};
use crate::scalar::positive;
use crate::skipping::Modification;
use crate::{Error, Real, Result};

/// `phi[k][i]` is a `d x A` matrix whose column `a` is the feature of `(s, a)`.
#[derive(Clone, Debug)]
pub struct FeatureMap<T: Real> {
    dim: usize,
    l1: T,
    phi: Vec<Vec<DMatrix<T>>>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(mdp: &StagedMdp<T>, dim: usize, l1: T, phi: Vec<Vec<DMatrix<T>>>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("feature dimension must be positive"));
        }
        if !positive(l1) {
            return Err(invalid("feature norm bound must be positive"));
        }
        if phi.len() != mdp.horizon() + 1 {
            return Err(invalid("features must cover every stage"));
        }
        let tol = T::tol(1e-9);
        for (k, stage) in phi.iter().enumerate() {
            if stage.len() != mdp.stage_len(k) {
                return Err(invalid(format!(
                    "feature stage {} has wrong state count",
                    k + 1
                )));
            }
            for m in stage {
                if m.nrows() != dim || m.ncols() != mdp.actions() {
                    return Err(invalid("feature block has wrong shape"));
                }
                for col in m.column_iter() {
                    if col.iter().any(|x| !x.is_finite()) || col.norm() > l1 + tol {
                        return Err(invalid("feature vector exceeds the norm bound"));
                    }
                }
            }
        }
        Ok(Self { dim, l1, phi })
    }

    /// Builds a map from per-pair vectors `phi[k][i][a]`, taking `L1` as the largest norm.
    pub fn from_vectors(
        mdp: &StagedMdp<T>,
        dim: usize,
        phi: Vec<Vec<Vec<Vec<T>>>>,
    ) -> Result<Self> {
        let mut l1 = T::zero();
        let mut blocks = Vec::with_capacity(phi.len());
        for stage in phi {
            let mut rows = Vec::with_capacity(stage.len());
            for state in stage {
                if state.iter().any(|v| v.len() != dim) {
                    return Err(invalid("feature vector has wrong length"));
                }
                let cols: Vec<DVector<T>> = state.into_iter().map(DVector::from_vec).collect();
                for c in &cols {
                    l1 = l1.max(c.norm());
                }
                if cols.is_empty() {
                    return Err(invalid("state without actions"));
                }
                rows.push(DMatrix::from_columns(&cols));
            }
            blocks.push(rows);
        }
        if l1 == T::zero() {
            l1 = T::one();
        }
        Self::new(mdp, dim, l1, blocks)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn l1(&self) -> T {
        self.l1
    }

    pub fn state_matrix(&self, k: usize, i: usize) -> &DMatrix<T> {
        &self.phi[k][i]
    }

    pub fn phi(&self, k: usize, i: usize, a: usize) -> DVector<T> {
        self.phi[k][i].column(a).into_owned()
    }

    pub fn stages(&self) -> &[Vec<DMatrix<T>>] {
        &self.phi
    }

    /// Rows `i * A + a` of all stage-`k` features.
    pub fn stage_matrix(&self, k: usize) -> DMatrix<T> {
        let blocks = &self.phi[k];
        let actions = blocks[0].ncols();
        let mut m = DMatrix::zeros(blocks.len() * actions, self.dim);
        for (i, b) in blocks.iter().enumerate() {
            for a in 0..actions {
                m.row_mut(i * actions + a)
                    .copy_from(&b.column(a).transpose());
            }
        }
        m
    }

    /// `<phi(s, a), theta>` for every action of local state `i` at stage `k`.
    pub fn linear_values(&self, k: usize, i: usize, theta: &DVector<T>) -> DVector<T> {
        self.phi[k][i].tr_mul(theta)
    }
}

/// A parameter together with the radius of the ball it must lie in.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector<T: Real> {
    pub theta: DVector<T>,
    pub norm_bound: T,
}

impl<T: Real> ParamVector<T> {
    pub fn new(theta: DVector<T>, norm_bound: T) -> Result<Self> {
        if theta.norm() > norm_bound + T::tol(1e-9) {
            return Err(invalid(format!(
                "parameter norm {} exceeds bound {}",
                theta.norm(),
                norm_bound
            )));
        }
        Ok(Self { theta, norm_bound })
    }
}

/// Per-stage least-squares fit of a policy's action values.
#[derive(Clone, Debug)]
pub struct StageFits<T: Real> {
    pub thetas: Vec<DVector<T>>,
    pub residuals: Vec<T>,
    pub degenerate: Vec<bool>,
}

impl<T: Real> StageFits<T> {
    pub fn max_residual(&self) -> T {
        self.residuals.iter().fold(T::zero(), |m, r| m.max(*r))
    }

    pub fn max_norm(&self) -> T {
        self.thetas.iter().fold(T::zero(), |m, t| m.max(t.norm()))
    }

    /// Realizability audit for one policy.
    pub fn passes(&self, l2: T) -> bool {
        self.max_residual() <= T::tol(1e-8) && self.max_norm() <= l2 + T::tol(1e-9)
    }
}

struct StageSolver<T: Real> {
    matrix: DMatrix<T>,
    solver: MinNormSolver<T>,
}

impl<T: Real> StageSolver<T> {
    fn new(features: &FeatureMap<T>, k: usize) -> Self {
        let matrix = features.stage_matrix(k);
        let solver = MinNormSolver::new(&matrix);
        Self { matrix, solver }
    }

    fn fit(&self, q: &[Vec<T>]) -> (DVector<T>, T) {
        let b = DVector::from_iterator(self.matrix.nrows(), q.iter().flatten().copied());
        let theta = self.solver.solve(&b);
        let resid = (&self.matrix * &theta - &b).amax();
        (theta, resid)
    }

    fn degenerate(&self) -> bool {
        self.solver.rank() < self.solver.cols()
    }
}

/// Minimum-norm least-squares fit of a stage table `q[i][a]`, with the max
/// absolute residual.
pub fn fit_stage_values<T: Real>(
    features: &FeatureMap<T>,
    k: usize,
    q: &[Vec<T>],
) -> (DVector<T>, T) {
    StageSolver::new(features, k).fit(q)
}

/// Least-squares parameters of `q^pi` at every stage (minimum norm when degenerate).
pub fn fit_theta<T: Real>(
    mdp: &StagedMdp<T>,
    features: &FeatureMap<T>,
    pi: &Policy<T>,
) -> Result<StageFits<T>> {
    let q = backward_q(mdp, pi)?;
    let mut fits = StageFits {
        thetas: Vec::new(),
        residuals: Vec::new(),
        degenerate: Vec::new(),
    };
    for k in 0..=mdp.horizon() {
        let s = StageSolver::new(features, k);
        let (theta, resid) = s.fit(&q.q[k]);
        fits.thetas.push(theta);
        fits.residuals.push(resid);
        fits.degenerate.push(s.degenerate());
    }
    Ok(fits)
}

/// `ceil(4 d max(0, ln ln d) + 16)`.
pub fn design_size(d: usize) -> usize {
    let lnln = if d >= 2 {
        (d as f64).ln().ln().max(0.0)
    } else {
        0.0
    };
    (4.0 * d as f64 * lnln + 16.0).ceil() as usize
}

/// Everything learned from enumerating the deterministic continuations of one stage.
#[derive(Clone, Debug)]
pub struct StageScan<T: Real> {
    pub stage: usize,
    /// Exact range of every local state of the stage.
    pub ranges: Vec<T>,
    /// Distinct stage parameters of deterministic policies (empty without features).
    pub params: Vec<DVector<T>>,
    pub max_residual: T,
    pub max_norm: T,
    pub continuations: usize,
}

/// Number of deterministic continuations below stage `k`.
pub fn continuation_count<T: Real>(mdp: &StagedMdp<T>, k: usize) -> f64 {
    let states: usize = (k + 1..mdp.horizon()).map(|u| mdp.stage_len(u)).sum();
    (mdp.actions() as f64).powi(states as i32)
}

/// Enumerates every deterministic behaviour on stages after `k`; `q_k` only depends on those.
pub fn scan_stage<T: Real>(
    mdp: &StagedMdp<T>,
    features: Option<&FeatureMap<T>>,
    k: usize,
) -> Result<StageScan<T>> {
    let h = mdp.horizon();
    if k >= h {
        return Err(invalid("scan_stage needs a non-terminal stage"));
    }
    check_enumeration(continuation_count(mdp, k))?;
    let solver = features.map(|f| StageSolver::new(f, k));
    let dedup_tol = T::lit(1e-9);
    let sizes: Vec<usize> = (k + 1..h).map(|u| mdp.stage_len(u)).collect();
    let mut v: Vec<Vec<T>> = (0..=h).map(|u| vec![T::zero(); mdp.stage_len(u)]).collect();
    let mut ranges = vec![T::zero(); mdp.stage_len(k)];
    let mut params: Vec<DVector<T>> = Vec::new();
    let mut max_residual = T::zero();
    let mut max_norm = T::zero();
    let mut continuations = 0usize;
    let actions = mdp.actions();
    enumerate_choices(&sizes, actions, |choices, changed| {
        continuations += 1;
        if !sizes.is_empty() {
            for t in (0..=changed).rev() {
                let u = k + 1 + t;
                let next = std::mem::take(&mut v[u + 1]);
                v[u] = (0..mdp.stage_len(u))
                    .map(|i| {
                        let a = choices[t][i];
                        mdp.reward(u, i, a) + mdp.expect_next(u, i, a, &next)
                    })
                    .collect();
                v[u + 1] = next;
            }
        }
        let q: Vec<Vec<T>> = (0..mdp.stage_len(k))
            .map(|i| {
                (0..actions)
                    .map(|a| mdp.reward(k, i, a) + mdp.expect_next(k, i, a, &v[k + 1]))
                    .collect()
            })
            .collect();
        for (i, row) in q.iter().enumerate() {
            let hi = row.iter().fold(row[0], |m, x| m.max(*x));
            let lo = row.iter().fold(row[0], |m, x| m.min(*x));
            ranges[i] = ranges[i].max(hi - lo);
        }
        if let Some(s) = &solver {
            let (theta, resid) = s.fit(&q);
            max_residual = max_residual.max(resid);
            max_norm = max_norm.max(theta.norm());
            if !params.iter().any(|p| (p - &theta).amax() <= dedup_tol) {
                params.push(theta);
            }
        }
    });
    Ok(StageScan {
        stage: k,
        ranges,
        params,
        max_residual,
        max_norm,
        continuations,
    })
}

/// Exact range of every state, `[stage][local state]`; the terminal stage is 0.
pub fn exact_ranges<T: Real>(mdp: &StagedMdp<T>) -> Result<Vec<Vec<T>>> {
    let mut out = Vec::with_capacity(mdp.horizon() + 1);
    for k in 0..mdp.horizon() {
        out.push(scan_stage(mdp, None, k)?.ranges);
    }
    out.push(vec![T::zero()]);
    Ok(out)
}

/// `sup_pi max_{a,a'} q^pi(s,a) - q^pi(s,a')` for the state with id `state`.
pub fn exact_range<T: Real>(mdp: &StagedMdp<T>, state: usize) -> Result<T> {
    let (k, i) = mdp
        .locate(state)
        .ok_or_else(|| invalid(format!("unknown state {state}")))?;
    if k == mdp.horizon() {
        return Ok(T::zero());
    }
    Ok(scan_stage(mdp, None, k)?.ranges[i])
}

/// Realizability over all deterministic policies.
#[derive(Clone, Debug)]
pub struct RealizabilityAudit<T: Real> {
    pub scans: Vec<StageScan<T>>,
    pub max_residual: T,
    /// Largest parameter norm seen; a valid `L2` for the instance.
    pub max_norm: T,
}

impl<T: Real> RealizabilityAudit<T> {
    pub fn passes(&self) -> bool {
        self.max_residual <= T::tol(1e-8)
    }
}

pub fn audit_realizability<T: Real>(
    mdp: &StagedMdp<T>,
    features: &FeatureMap<T>,
) -> Result<RealizabilityAudit<T>> {
    let mut scans = Vec::with_capacity(mdp.horizon());
    for k in 0..mdp.horizon() {
        scans.push(scan_stage(mdp, Some(features), k)?);
    }
    let max_residual = scans.iter().fold(T::zero(), |m, s| m.max(s.max_residual));
    let max_norm = scans.iter().fold(T::zero(), |m, s| m.max(s.max_norm));
    Ok(RealizabilityAudit {
        scans,
        max_residual,
        max_norm,
    })
}

/// Weighted point set whose moment matrix certifies `‖θ‖²_{V†} ≤ 2d` on its candidates.
#[derive(Clone, Debug)]
pub struct DesignBasis<T: Real> {
    pub points: Vec<DVector<T>>,
    pub weights: Vec<T>,
    pub d0: usize,
    pub rank: usize,
    pub iterations: usize,
    /// Largest `‖θ‖²_{V†}` over the candidates.
    pub worst_ratio: T,
    /// Largest kernel component over the candidates.
    pub kernel_residual: T,
    eig: SymEig<T>,
}

impl<T: Real> DesignBasis<T> {
    /// `(‖θ‖²_{V†}, ‖P_ker θ‖)` for any parameter.
    pub fn audit(&self, theta: &DVector<T>) -> (T, T) {
        self.eig.pinv_norm_sq_and_kernel(theta)
    }

    pub fn certifies(&self, theta: &DVector<T>) -> bool {
        let d = self.points.first().map_or(1, |p| p.len());
        let (ratio, ker) = self.audit(theta);
        ratio <= T::lit(2.0 * d as f64) + T::tol(1e-9) && ker <= T::tol(1e-8)
    }
}

fn moment<T: Real>(points: &[&DVector<T>], weights: &[T], dim: usize) -> DMatrix<T> {
    let mut v = DMatrix::zeros(dim, dim);
    for (p, w) in points.iter().zip(weights) {
        if *w > T::zero() {
            v.ger(*w, p, p, T::one());
        }
    }
    v
}

const FW_MAX_ITERS: usize = 10_000;

/// Frank-Wolfe with away steps for the D-optimal design on `ys` (full-rank
/// coordinates). Returns the number of iterations used.
fn frank_wolfe<T: Real>(ys: &[DVector<T>], w: &mut [T]) -> usize {
    let r = ys[0].len();
    let rf = T::lit(r as f64);
    let mut prev_logdet: Option<T> = None;
    for iter in 0..FW_MAX_ITERS {
        let refs: Vec<&DVector<T>> = ys.iter().collect();
        let m = moment(&refs, w, r);
        let Some(chol) = m.clone().cholesky() else {
            return iter;
        };
        let l = chol.l();
        let logdet = l.diagonal().iter().fold(T::zero(), |acc, x| acc + x.ln()) * T::lit(2.0);
        let g: Vec<T> = ys
            .iter()
            .map(|y| {
                let z = l.solve_lower_triangular(y).expect("triangular factor");
                z.norm_squared()
            })
            .collect();
        let (mut jp, mut jm) = (0usize, usize::MAX);
        for i in 0..g.len() {
            if g[i] > g[jp] {
                jp = i;
            }
            if w[i] > T::zero() && (jm == usize::MAX || g[i] < g[jm]) {
                jm = i;
            }
        }
        if g[jp] <= rf * (T::one() + T::tol(1e-9)) {
            return iter;
        }
        if let Some(prev) = prev_logdet {
            if (logdet - prev).abs() <= T::lit(1e-10) * logdet.abs().max(T::one()) {
                return iter;
            }
        }
        let toward_gap = g[jp] - rf;
        let away_gap = if jm == usize::MAX {
            T::zero()
        } else {
            rf - g[jm]
        };
        let mut dropped = false;
        if toward_gap >= away_gap || w[jm] >= T::one() {
            let gamma = toward_gap / (rf * (g[jp] - T::one()));
            for x in w.iter_mut() {
                *x *= T::one() - gamma;
            }
            w[jp] += gamma;
        } else {
            let wm = w[jm];
            let bound = -wm / (T::one() - wm);
            let gamma = if g[jm] > T::one() {
                ((g[jm] - rf) / (rf * (g[jm] - T::one()))).max(bound)
            } else {
                bound
            };
            for x in w.iter_mut() {
                *x *= T::one() - gamma;
            }
            w[jm] += gamma;
            if gamma <= bound {
                w[jm] = T::zero();
                dropped = true;
            }
        }
        prev_logdet = if dropped { None } else { Some(logdet) };
    }
    FW_MAX_ITERS
}

/// Near-optimal design over `candidates`, with at most `d0` support points.
pub fn build_design<T: Real>(candidates: &[DVector<T>], d0: usize) -> Result<DesignBasis<T>> {
    let Some(first) = candidates.first() else {
        return Err(invalid("design needs at least one candidate"));
    };
    let dim = first.len();
    if candidates.iter().any(|c| c.len() != dim) {
        return Err(invalid("candidates have different dimensions"));
    }
    let tol = T::lit(1e-9);
    let mut uniq: Vec<DVector<T>> = Vec::new();
    for c in candidates {
        if !uniq.iter().any(|u| (u - c).amax() <= tol) {
            uniq.push(c.clone());
        }
    }
    let m = uniq.len();
    let mut mat = DMatrix::zeros(m, dim);
    for (i, c) in uniq.iter().enumerate() {
        mat.row_mut(i).copy_from(&c.transpose());
    }
    let svd = mat.svd(false, true);
    let v_t = svd.v_t.expect("requested right singular vectors");
    let smax = svd.singular_values.iter().fold(T::zero(), |a, s| a.max(*s));
    let cut = crate::linalg::rank_cutoff(smax, m.max(dim)).max(T::lit(1e-10) * smax);
    let basis_rows: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| svd.singular_values[i] > cut && smax > T::tol(1e-12))
        .collect();
    let rank = basis_rows.len();

    let (points, weights, iterations) = if rank == 0 {
        (vec![uniq[0].clone()], vec![T::one()], 0)
    } else {
        let u_t = DMatrix::from_fn(rank, dim, |r, c| v_t[(basis_rows[r], c)]);
        let ys: Vec<DVector<T>> = uniq.iter().map(|c| &u_t * c).collect();
        let mut w = vec![T::one() / T::lit(m as f64); m];
        let mut iters = frank_wolfe(&ys, &mut w);
        let mut support: Vec<usize> = (0..m).filter(|&i| w[i] > T::zero()).collect();
        if support.len() > d0 {
            support.sort_by(|a, b| w[*b].partial_cmp(&w[*a]).unwrap().then(a.cmp(b)));
            support.truncate(d0);
            support.sort_unstable();
            let sub: Vec<DVector<T>> = support.iter().map(|&i| ys[i].clone()).collect();
            let total = support.iter().fold(T::zero(), |a, &i| a + w[i]);
            let mut sw: Vec<T> = support.iter().map(|&i| w[i] / total).collect();
            iters += frank_wolfe(&sub, &mut sw);
            let kept: Vec<(usize, T)> = support
                .iter()
                .zip(sw)
                .filter(|(_, x)| *x > T::zero())
                .map(|(i, x)| (*i, x))
                .collect();
            support = kept.iter().map(|(i, _)| *i).collect();
            for (i, x) in kept {
                w[i] = x;
            }
        }
        let total = support.iter().fold(T::zero(), |a, &i| a + w[i]);
        (
            support.iter().map(|&i| uniq[i].clone()).collect(),
            support.iter().map(|&i| w[i] / total).collect::<Vec<T>>(),
            iters,
        )
    };

    let refs: Vec<&DVector<T>> = points.iter().collect();
    let eig = SymEig::new(&moment(&refs, &weights, dim));
    let mut worst_ratio = T::zero();
    let mut kernel_residual = T::zero();
    for c in &uniq {
        let (ratio, ker) = eig.pinv_norm_sq_and_kernel(c);
        worst_ratio = worst_ratio.max(ratio);
        kernel_residual = kernel_residual.max(ker);
    }
    let bound = 2.0 * dim as f64;
    if worst_ratio > T::lit(bound) + T::tol(1e-9) || kernel_residual > T::tol(1e-8) {
        return Err(Error::Certificate {
            worst_ratio: if kernel_residual > T::tol(1e-8) {
                f64::INFINITY
            } else {
                worst_ratio.as_f64()
            },
            bound,
        });
    }
    Ok(DesignBasis {
        points,
        weights,
        d0,
        rank,
        iterations,
        worst_ratio,
        kernel_residual,
        eig,
    })
}

/// `max_{ϑ∈points} max_{a,a'} <φ(s,a) - φ(s,a'), ϑ>` for a `d x A` feature block.
pub fn point_range<T: Real>(points: &[DVector<T>], block: &DMatrix<T>) -> T {
    let mut best = T::zero();
    for p in points {
        let vals = block.tr_mul(p);
        best = best.max(vals.max() - vals.min());
    }
    best
}

/// Parametric range of local state `i` at stage `k`; unbounded for the no-skip sentinel.
pub fn range_g<T: Real>(features: &FeatureMap<T>, g: &Modification<T>, k: usize, i: usize) -> T {
    if g.no_skip {
        return T::max_value().expect("bounded scalar");
    }
    match g.per_stage.get(k) {
        Some(points) => point_range(points, features.state_matrix(k, i)),
        None => T::zero(),
    }
}

/// The design-basis modification built from every deterministic policy's parameters.
#[derive(Clone, Debug)]
pub struct TrueModification<T: Real> {
    pub modification: Modification<T>,
    pub designs: Vec<DesignBasis<T>>,
    pub audit: RealizabilityAudit<T>,
}

pub fn true_modification<T: Real>(
    mdp: &StagedMdp<T>,
    features: &FeatureMap<T>,
    alpha: T,
) -> Result<TrueModification<T>> {
    let audit = audit_realizability(mdp, features)?;
    true_modification_from_audit(features, audit, alpha)
}

/// Same as [`true_modification`] reusing an existing audit.
pub fn true_modification_from_audit<T: Real>(
    features: &FeatureMap<T>,
    audit: RealizabilityAudit<T>,
    alpha: T,
) -> Result<TrueModification<T>> {
    let d0 = design_size(features.dim());
    let mut designs = Vec::with_capacity(audit.scans.len());
    for scan in &audit.scans {
        designs.push(build_design(&scan.params, d0)?);
    }
    let per_stage = designs.iter().map(|d| d.points.clone()).collect();
    let modification = Modification::new(alpha, per_stage)?;
    Ok(TrueModification {
        modification,
        designs,
        audit,
    })
}
