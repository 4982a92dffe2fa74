//! Ridge design matrices, ball-constrained least squares, ellipsoidal confidence
//! sets and the explicit confidence constants.

use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::invalid;
use crate::features::{design_size, FeatureMap};
use crate::mdp::{occupancy, sample_dataset, Policy, StagedMdp};
use crate::scalar::{clip, positive};
use crate::{Error, Real, Result};

/// `X̂ = λI + Σ φφᵀ` with cached Cholesky and eigen factorizations.
#[derive(Clone, Debug)]
pub struct StageDesignMatrix<T: Real> {
    x_hat: DMatrix<T>,
    lambda: T,
    chol: Cholesky<T, Dyn>,
    eig_values: DVector<T>,
    eig_vectors: DMatrix<T>,
}

impl<T: Real> StageDesignMatrix<T> {
    pub fn new<'a>(
        dim: usize,
        lambda: T,
        rows: impl IntoIterator<Item = &'a DVector<T>>,
    ) -> Result<Self> {
        if !positive(lambda) {
            return Err(invalid("ridge parameter must be positive and finite"));
        }
        let mut x_hat = DMatrix::identity(dim, dim) * lambda;
        for r in rows {
            if r.len() != dim {
                return Err(invalid("feature row has the wrong dimension"));
            }
            x_hat.ger(T::one(), r, r, T::one());
        }
        Self::from_matrix(x_hat, lambda)
    }

    pub fn from_matrix(x_hat: DMatrix<T>, lambda: T) -> Result<Self> {
        let x_hat = (&x_hat + x_hat.transpose()) * T::lit(0.5);
        let chol = x_hat
            .clone()
            .cholesky()
            .ok_or_else(|| invalid("design matrix is not positive definite"))?;
        let eig = x_hat.clone().symmetric_eigen();
        Ok(Self {
            x_hat,
            lambda,
            chol,
            eig_values: eig.eigenvalues,
            eig_vectors: eig.eigenvectors,
        })
    }

    pub fn x_hat(&self) -> &DMatrix<T> {
        &self.x_hat
    }

    pub fn lambda(&self) -> T {
        self.lambda
    }

    pub fn dim(&self) -> usize {
        self.x_hat.nrows()
    }

    pub fn min_eigenvalue(&self) -> T {
        self.eig_values.min()
    }

    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        self.chol.solve(b)
    }

    /// `√(vᵀ X̂⁻¹ v)`.
    pub fn elliptical_norm(&self, v: &DVector<T>) -> T {
        self.chol
            .l_dirty()
            .solve_lower_triangular(v)
            .map(|z| z.norm())
            .unwrap_or_else(|| self.solve(v).dot(v).max(T::zero()).sqrt())
    }

    /// `‖v‖_{X̂}`.
    pub fn norm(&self, v: &DVector<T>) -> T {
        (&self.x_hat * v).dot(v).max(T::zero()).sqrt()
    }
}

/// `Σ_j φ_j y_j`.
pub fn moment_vector<T: Real>(dim: usize, rows: &[DVector<T>], targets: &[T]) -> DVector<T> {
    let mut b = DVector::zeros(dim);
    for (r, y) in rows.iter().zip(targets) {
        b.axpy(*y, r, T::one());
    }
    b
}

/// Minimizes `Σ_j (⟨φ_j, θ⟩ − y_j)² + λ‖θ‖²` subject to `‖θ‖ ≤ bound`.
pub fn constrained_ls<T: Real>(
    design: &StageDesignMatrix<T>,
    rows: &[DVector<T>],
    targets: &[T],
    bound: T,
) -> Result<DVector<T>> {
    if rows.len() != targets.len() {
        return Err(invalid("one target per feature row is required"));
    }
    if targets.iter().any(|y| !y.is_finite()) {
        return Err(invalid("targets must be finite"));
    }
    let b = moment_vector(design.dim(), rows, targets);
    Ok(ball_constrained_solve(design, &b, bound))
}

/// Solves `(X̂ + μI) θ = b` with the smallest `μ ≥ 0` giving `‖θ‖ ≤ bound`.
pub fn ball_constrained_solve<T: Real>(
    design: &StageDesignMatrix<T>,
    b: &DVector<T>,
    bound: T,
) -> DVector<T> {
    let ridge = design.solve(b);
    if ridge.norm() <= bound {
        return ridge;
    }
    let c = design.eig_vectors.tr_mul(b);
    let e = &design.eig_values;
    let norm_at = |mu: T| {
        c.iter()
            .zip(e.iter())
            .fold(T::zero(), |acc, (ci, ei)| {
                let t = *ci / (*ei + mu);
                acc + t * t
            })
            .sqrt()
    };
    let mut lo = T::zero();
    let mut hi = (b.norm() / bound).max(T::tiny());
    while norm_at(hi) > bound {
        hi *= T::lit(2.0);
    }
    for _ in 0..200 {
        let mid = (lo + hi) * T::lit(0.5);
        if mid <= lo || mid >= hi {
            break;
        }
        if norm_at(mid) > bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let coords = DVector::from_iterator(
        c.len(),
        c.iter().zip(e.iter()).map(|(ci, ei)| *ci / (*ei + hi)),
    );
    let mut theta = &design.eig_vectors * coords;
    let n = theta.norm();
    if n > bound {
        theta *= bound / n;
    }
    theta
}

/// `{θ : ‖θ − θ̂‖_{X̂} ≤ β} ∩ B(L′₂)`.
#[derive(Clone, Debug)]
pub struct ConfidenceSet<T: Real> {
    pub center: DVector<T>,
    pub beta: T,
    pub bound: T,
    pub design: Arc<StageDesignMatrix<T>>,
}

impl<T: Real> ConfidenceSet<T> {
    pub fn new(
        center: DVector<T>,
        beta: T,
        bound: T,
        design: Arc<StageDesignMatrix<T>>,
    ) -> Result<Self> {
        if beta < T::zero() || !beta.is_finite() {
            return Err(invalid("confidence radius must be finite and nonnegative"));
        }
        if center.norm() > bound + T::tol(1e-9) {
            return Err(invalid("confidence center outside the norm ball"));
        }
        Ok(Self {
            center,
            beta,
            bound,
            design,
        })
    }

    pub fn contains(&self, theta: &DVector<T>, tol: T) -> bool {
        self.design.norm(&(theta - &self.center)) <= self.beta + tol
            && theta.norm() <= self.bound + tol
    }

    /// `max ⟨φ, θ⟩` over the set.
    pub fn support(&self, phi: &DVector<T>) -> T {
        let centre_val = phi.dot(&self.center);
        let pn = phi.norm();
        if pn == T::zero() || self.beta == T::zero() {
            return centre_val;
        }
        let nx = self.design.elliptical_norm(phi);
        let step = self.design.solve(phi) * (self.beta / nx);
        let theta_e = &self.center + &step;
        if theta_e.norm() <= self.bound {
            return centre_val + self.beta * nx;
        }
        let theta_b = phi * (self.bound / pn);
        if self.design.norm(&(&theta_b - &self.center)) <= self.beta {
            return self.bound * pn;
        }
        self.two_constraint_support(phi)
    }

    /// Minimizes over `s ∈ [0,1]` the support of the aggregated ellipsoid
    /// `(1−s)(‖θ−θ̂‖²_{X̂} − β²) + s(‖θ‖² − L²) ≤ 0`, which contains the
    /// intersection; the minimum equals the support of the intersection.
    fn two_constraint_support(&self, phi: &DVector<T>) -> T {
        let d = &*self.design;
        let e = &d.eig_values;
        let pt = d.eig_vectors.tr_mul(phi);
        let ct = d.eig_vectors.tr_mul(&self.center);
        let xc = ct
            .iter()
            .zip(e.iter())
            .fold(T::zero(), |a, (c, ei)| a + *ei * *c * *c);
        let beta2 = self.beta * self.beta;
        let l2 = self.bound * self.bound;
        let eval = |s: T| -> (T, T) {
            let one_s = T::one() - s;
            let m: Vec<T> = e.iter().map(|ei| one_s * *ei + s).collect();
            let c: Vec<T> = ct
                .iter()
                .zip(e.iter())
                .zip(&m)
                .map(|((cti, ei), mi)| one_s * *ei * *cti / *mi)
                .collect();
            let cmc = c
                .iter()
                .zip(&m)
                .fold(T::zero(), |a, (ci, mi)| a + *mi * *ci * *ci);
            let r2 = (one_s * beta2 + s * l2 - one_s * xc + cmc).max(T::zero());
            let pm = pt
                .iter()
                .zip(&m)
                .fold(T::zero(), |a, (pi, mi)| a + *pi * *pi / *mi)
                .sqrt();
            let theta: Vec<T> = c
                .iter()
                .zip(pt.iter())
                .zip(&m)
                .map(|((ci, pi), mi)| *ci + r2.sqrt() * *pi / (*mi * pm))
                .collect();
            let value = c
                .iter()
                .zip(pt.iter())
                .fold(T::zero(), |a, (ci, pi)| a + *ci * *pi)
                + r2.sqrt() * pm;
            let g1 = theta
                .iter()
                .zip(ct.iter())
                .zip(e.iter())
                .fold(T::zero(), |a, ((t, c), ei)| a + *ei * (*t - *c) * (*t - *c))
                - beta2;
            let g2 = theta.iter().fold(T::zero(), |a, t| a + *t * *t) - l2;
            (value, g2 / l2.max(T::tiny()) - g1 / beta2.max(T::tiny()))
        };
        let (mut lo, mut hi) = (T::zero(), T::one());
        let mut best = eval(lo).0.min(eval(hi).0);
        let tol = T::tol(1e-10);
        while hi - lo > tol {
            let mid = (lo + hi) * T::lit(0.5);
            if mid <= lo || mid >= hi {
                break;
            }
            let (value, diff) = eval(mid);
            best = best.min(value);
            if diff > T::zero() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        best
    }

    /// Unclipped `(min, max)` of `⟨φ, θ⟩` over the set.
    pub fn extremes_unclipped(&self, phi: &DVector<T>) -> (T, T) {
        let hi = self.support(phi);
        let lo = -self.support(&(-phi));
        (lo, hi)
    }
}

/// Clipped `(min, max)` of `q̄_θ(φ)` over the confidence set.
pub fn ellipsoid_extremes<T: Real>(cs: &ConfidenceSet<T>, phi: &DVector<T>, horizon: T) -> (T, T) {
    let (lo, hi) = cs.extremes_unclipped(phi);
    (clip(lo, horizon), clip(hi, horizon))
}

pub fn elliptical_norm<T: Real>(design: &StageDesignMatrix<T>, v: &DVector<T>) -> T {
    design.elliptical_norm(v)
}

/// Which learner the constants are sized for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Eval,
    Opt,
}

/// Multipliers on the explicit constants; all default to 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Multipliers {
    pub beta: f64,
    pub eps_bar: f64,
    pub zeta1: f64,
    pub zeta2: f64,
    pub alpha: f64,
}

impl Default for Multipliers {
    fn default() -> Self {
        Self {
            beta: 1.0,
            eps_bar: 1.0,
            zeta1: 1.0,
            zeta2: 1.0,
            alpha: 1.0,
        }
    }
}

/// Sizes entering the constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProblemSize<T> {
    pub horizon: usize,
    pub dim: usize,
    pub actions: usize,
    pub n: usize,
    pub l1: T,
    pub l2: T,
    pub conc: T,
    pub delta: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants<T> {
    pub d0: usize,
    pub alpha: T,
    pub l2_prime: T,
    pub lambda: T,
    pub beta_bar: T,
    pub beta: T,
    pub zeta1: T,
    pub zeta2: T,
    pub eps_check: T,
    pub eps_bar: T,
    pub eps_tilde: T,
    pub alpha_tilde: T,
}

fn lit<T: Real>(x: usize) -> T {
    T::lit(x as f64)
}

/// `C*^{5/2} H^{5/2} d^{3/2} / √n` (eval) or `C*^{3/2} H^{5/2} d^{3/2} / √n` (opt).
pub fn auto_alpha<T: Real>(size: &ProblemSize<T>, objective: Objective) -> T {
    let c_pow = match objective {
        Objective::Eval => T::lit(2.5),
        Objective::Opt => T::lit(1.5),
    };
    size.conc.powf(c_pow)
        * lit::<T>(size.horizon).powf(T::lit(2.5))
        * lit::<T>(size.dim).powf(T::lit(1.5))
        / lit::<T>(size.n).sqrt()
}

/// `L′₂ = L₂ (8H²d₀/α + 1)`.
pub fn l2_prime<T: Real>(l2: T, horizon: usize, d0: usize, alpha: T) -> T {
    let h: T = lit(horizon);
    l2 * (T::lit(8.0) * h * h * lit::<T>(d0) / alpha + T::one())
}

/// `λ = H^{3/2} d / L′₂`.
pub fn ridge_lambda<T: Real>(horizon: usize, dim: usize, l2p: T) -> T {
    lit::<T>(horizon).powf(T::lit(1.5)) * lit::<T>(dim) / l2p
}

/// `β = c_β (√λ L′₂ + β̄)`.
#[allow(clippy::too_many_arguments)]
pub fn beta<T: Real>(
    horizon: usize,
    dim: usize,
    d0: usize,
    l1: T,
    l2: T,
    l2p: T,
    alpha: T,
    lambda: T,
    n: usize,
    delta: T,
    c_beta: T,
) -> (T, T) {
    let h: T = lit(horizon);
    let d: T = lit(dim);
    let two = T::lit(2.0);
    let log_cover =
        (T::one() + T::lit(28.0) * (two * d).sqrt() * h * h * l2 * l2p * l1 / alpha).ln();
    let det = d * (lambda + lit::<T>(n) * l1 * l1 / d).ln() - d * lambda.ln();
    let inner = two * d * h * lit::<T>(d0 + 1) * log_cover + det + (T::lit(10.0) * h / delta).ln();
    let beta_bar = two * h * inner.max(T::zero()).sqrt();
    (beta_bar, c_beta * (lambda.sqrt() * l2p + beta_bar))
}

#[allow(clippy::too_many_arguments)]
pub fn zeta1<T: Real>(
    horizon: usize,
    dim: usize,
    d0: usize,
    l1: T,
    l2: T,
    l2p: T,
    alpha: T,
    n: usize,
    delta: T,
) -> T {
    let h: T = lit(horizon);
    let d: T = lit(dim);
    let rn = lit::<T>(n).sqrt();
    let two = T::lit(2.0);
    let arg = T::one()
        + T::lit(96.0) * rn * (two * d).sqrt() * h * h * l1 * l2 / alpha * rn * l1 * l2p
            / (h.powf(T::lit(1.5)) * d);
    two * h / rn * (d * h * h * lit::<T>(d0) * arg.ln() + (T::lit(20.0) * h / delta).ln()).sqrt()
}

pub fn zeta2<T: Real>(
    horizon: usize,
    dim: usize,
    actions: usize,
    l1: T,
    l2p: T,
    n: usize,
    delta: T,
) -> T {
    let h: T = lit(horizon);
    let a: T = lit(actions);
    let arg = T::lit(4.0) * h * a * a * (T::one() + T::lit(4.0) * l2p * l1) / delta;
    lit::<T>(dim).sqrt() * h / lit::<T>(n).sqrt() * arg.ln().sqrt() + T::one()
}

/// All constants for one run; `alpha = None` selects the automatic setting.
pub fn constants<T: Real>(
    size: &ProblemSize<T>,
    objective: Objective,
    alpha: Option<T>,
    mult: &Multipliers,
) -> Result<Constants<T>> {
    if size.n == 0 || size.horizon == 0 || size.dim == 0 || size.actions == 0 {
        return Err(invalid("sizes must be positive"));
    }
    if !(size.delta > T::zero() && size.delta < T::one()) {
        return Err(Error::Config("delta must lie in (0, 1)".into()));
    }
    if !size.conc.is_finite() || size.conc < T::one() {
        return Err(Error::Config(
            "concentrability must be finite and at least 1".into(),
        ));
    }
    if !positive(size.l1) || !positive(size.l2) {
        return Err(invalid("norm bounds must be positive"));
    }
    let alpha = match alpha {
        Some(a) => a,
        None => T::lit(mult.alpha) * auto_alpha(size, objective),
    };
    if !positive(alpha) {
        return Err(Error::Config("alpha must be positive".into()));
    }
    let d0 = design_size(size.dim);
    let l2p = l2_prime(size.l2, size.horizon, d0, alpha);
    let lambda = ridge_lambda(size.horizon, size.dim, l2p);
    let delta_main = match objective {
        Objective::Eval => size.delta / T::lit(2.0),
        Objective::Opt => size.delta,
    };
    let (beta_bar, beta) = beta(
        size.horizon,
        size.dim,
        d0,
        size.l1,
        size.l2,
        l2p,
        alpha,
        lambda,
        size.n,
        delta_main,
        T::lit(mult.beta),
    );
    let zeta1 = T::lit(mult.zeta1)
        * zeta1(
            size.horizon,
            size.dim,
            d0,
            size.l1,
            size.l2,
            l2p,
            alpha,
            size.n,
            delta_main,
        );
    let zeta2 = T::lit(mult.zeta2)
        * zeta2(
            size.horizon,
            size.dim,
            size.actions,
            size.l1,
            l2p,
            size.n,
            size.delta,
        );
    let eps_check = T::lit(15.0) * lit::<T>(size.dim) / lit::<T>(size.n);
    let h: T = lit(size.horizon);
    let eps_bar = T::lit(mult.eps_bar)
        * (zeta1 + T::lit(4.0) * size.conc.sqrt() * h * beta * eps_check.sqrt());
    let eps_tilde = size.conc * (eps_bar + zeta1);
    let alpha_tilde = size.conc * (alpha + T::lit(2.0) * eps_tilde + T::lit(2.0) * zeta2);
    Ok(Constants {
        d0,
        alpha,
        l2_prime: l2p,
        lambda,
        beta_bar,
        beta,
        zeta1,
        zeta2,
        eps_check,
        eps_bar,
        eps_tilde,
        alpha_tilde,
    })
}

/// Smallest `n` with `n ≥ 6 L₁² (ln d + ln(40H/δ))`.
pub fn required_samples<T: Real>(l1: T, dim: usize, horizon: usize, delta: T) -> usize {
    let v = T::lit(6.0)
        * l1
        * l1
        * (lit::<T>(dim).ln() + (T::lit(40.0) * lit::<T>(horizon) / delta).ln());
    v.as_f64().ceil().max(1.0) as usize
}

/// Exact `E_{μ_k} ‖φ‖²_{X̂⁻¹}` per stage for each seed.
#[derive(Clone, Debug)]
pub struct CovarianceReport<T> {
    pub n: usize,
    pub bound: T,
    pub seeds: Vec<u64>,
    /// `[seed][stage]` for the non-terminal stages.
    pub expectations: Vec<Vec<T>>,
    pub passing_seeds: usize,
}

impl<T: Real> CovarianceReport<T> {
    pub fn pass_fraction(&self) -> f64 {
        self.passing_seeds as f64 / self.seeds.len().max(1) as f64
    }

    /// Seed average per stage, then averaged over stages.
    pub fn mean_expectation(&self) -> T {
        let count = self.expectations.iter().map(Vec::len).sum::<usize>().max(1);
        self.expectations
            .iter()
            .flatten()
            .fold(T::zero(), |a, x| a + *x)
            / lit(count)
    }
}

pub fn covariance_concentration_check<T: Real>(
    mdp: &StagedMdp<T>,
    behavior: &Policy<T>,
    features: &FeatureMap<T>,
    n: usize,
    seeds: &[u64],
    lambda: T,
    delta: T,
) -> Result<CovarianceReport<T>> {
    let required = required_samples(features.l1(), features.dim(), mdp.horizon(), delta);
    if n < required {
        return Err(Error::InsufficientSamples { got: n, required });
    }
    let mu = occupancy(mdp, behavior)?;
    let dim = features.dim();
    let h = mdp.horizon();
    let bound = T::lit(15.0) * lit::<T>(dim) / lit::<T>(n);
    let expectations = seeds
        .par_iter()
        .map(|seed| {
            let data = sample_dataset(mdp, behavior, n, *seed)?;
            let mut per_stage = Vec::with_capacity(h);
            for k in 0..h {
                let rows: Vec<DVector<T>> = data
                    .trajectories
                    .iter()
                    .map(|t| {
                        let s = &t.steps[k];
                        let (_, i) = mdp.locate(s.state).expect("sampled state exists");
                        features.phi(k, i, s.action)
                    })
                    .collect();
                let design = StageDesignMatrix::new(dim, lambda, rows.iter())?;
                per_stage.push(mu.expectation(k, |i, a| {
                    let nv = design.elliptical_norm(&features.phi(k, i, a));
                    nv * nv
                }));
            }
            Ok(per_stage)
        })
        .collect::<Result<Vec<Vec<T>>>>()?;
    let passing_seeds = expectations
        .iter()
        .filter(|e| e.iter().all(|x| *x <= bound))
        .count();
    Ok(CovarianceReport {
        n,
        bound,
        seeds: seeds.to_vec(),
        expectations,
        passing_seeds,
    })
}
