//! Small dense helpers shared by the feature, design and regression layers.

use nalgebra::{DMatrix, DVector};

use crate::Real;

/// Minimum-norm least-squares solver for a fixed design matrix.
#[derive(Clone, Debug)]
pub struct MinNormSolver<T: Real> {
    pinv: DMatrix<T>,
    rank: usize,
}

impl<T: Real> MinNormSolver<T> {
    pub fn new(a: &DMatrix<T>) -> Self {
        let (rows, cols) = a.shape();
        if rows == 0 || cols == 0 {
            return Self {
                pinv: DMatrix::zeros(cols, rows),
                rank: 0,
            };
        }
        let svd = a.clone().svd(true, true);
        let smax = svd.singular_values.iter().fold(T::zero(), |m, s| m.max(*s));
        let cut = rank_cutoff(smax, rows.max(cols));
        let rank = svd.singular_values.iter().filter(|s| **s > cut).count();
        let pinv = svd
            .pseudo_inverse(cut)
            .unwrap_or_else(|_| DMatrix::zeros(cols, rows));
        Self { pinv, rank }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn cols(&self) -> usize {
        self.pinv.nrows()
    }

    pub fn solve(&self, b: &DVector<T>) -> DVector<T> {
        &self.pinv * b
    }
}

/// Singular values at or below this are treated as zero.
pub fn rank_cutoff<T: Real>(smax: T, dim: usize) -> T {
    let eps = T::default_epsilon();
    let rel = T::lit(dim.max(1) as f64) * eps * T::lit(16.0);
    (rel.max(T::lit(1e-12))) * smax.max(T::one())
}

/// Eigen-decomposition of a symmetric matrix with a pseudo-inverse quadratic form.
#[derive(Clone, Debug)]
pub struct SymEig<T: Real> {
    pub values: DVector<T>,
    pub vectors: DMatrix<T>,
    cut: T,
}

impl<T: Real> SymEig<T> {
    pub fn new(m: &DMatrix<T>) -> Self {
        let sym = (m + m.transpose()) * T::lit(0.5);
        let eig = sym.symmetric_eigen();
        let vmax = eig
            .eigenvalues
            .iter()
            .fold(T::zero(), |a, v| a.max(v.abs()));
        let cut = T::lit(1e-10) * vmax.max(T::tiny());
        Self {
            values: eig.eigenvalues,
            vectors: eig.eigenvectors,
            cut,
        }
    }

    /// `(‖x‖²_{M†}, ‖P_ker x‖)`.
    pub fn pinv_norm_sq_and_kernel(&self, x: &DVector<T>) -> (T, T) {
        let coords = self.vectors.transpose() * x;
        let mut quad = T::zero();
        let mut ker = T::zero();
        for (c, v) in coords.iter().zip(self.values.iter()) {
            if *v > self.cut {
                quad += *c * *c / *v;
            } else {
                ker += *c * *c;
            }
        }
        (quad, ker.sqrt())
    }

    pub fn min_value(&self) -> T {
        self.values
            .iter()
            .fold(T::max_value().unwrap(), |a, v| a.min(*v))
    }
}

pub fn max_abs<T: Real>(xs: impl IntoIterator<Item = T>) -> T {
    xs.into_iter().fold(T::zero(), |m, x| m.max(x.abs()))
}
