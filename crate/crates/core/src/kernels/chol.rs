//! Cholesky factorization with a diagonal jitter ladder.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{FusionError, Result};

/// Diagonal jitter schedule, relative to the mean diagonal of the matrix.
/// Starts at `initial` and multiplies by 10 until `max` is exceeded.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterPolicy {
    pub initial: f64,
    pub max: f64,
    /// Try the unmodified matrix before any jitter.
    pub try_exact: bool,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            initial: 1e-8,
            max: 1e-4,
            try_exact: false,
        }
    }
}

impl JitterPolicy {
    /// Exact factorization first, then the default ladder.
    pub fn exact_first() -> Self {
        JitterPolicy {
            try_exact: true,
            ..Default::default()
        }
    }

    fn ladder(&self) -> impl Iterator<Item = f64> + '_ {
        let exact = self.try_exact.then_some(0.0);
        let mut level = self.initial;
        let steps = std::iter::from_fn(move || {
            if level > self.max * (1.0 + 1e-9) {
                None
            } else {
                let cur = level;
                level *= 10.0;
                Some(cur)
            }
        });
        exact.into_iter().chain(steps)
    }
}

#[derive(Debug, Clone)]
pub struct CholFactor {
    chol: Cholesky<f64, Dyn>,
    /// Absolute jitter that was added to the diagonal.
    pub jitter: f64,
}

impl CholFactor {
    pub fn new(c: &DMatrix<f64>) -> Result<Self> {
        Self::with_policy(c, JitterPolicy::default())
    }

    pub fn with_policy(c: &DMatrix<f64>, policy: JitterPolicy) -> Result<Self> {
        let n = c.nrows();
        let scale = if n == 0 {
            1.0
        } else {
            let mean_diag = c.diagonal().iter().sum::<f64>() / n as f64;
            if mean_diag > 0.0 {
                mean_diag
            } else {
                1.0
            }
        };
        let mut last = 0.0;
        for rel in policy.ladder() {
            let jitter = rel * scale;
            last = jitter;
            let mut m = c.clone();
            if jitter > 0.0 {
                for i in 0..n {
                    m[(i, i)] += jitter;
                }
            }
            if let Some(chol) = Cholesky::new(m) {
                if chol.l_dirty().diagonal().iter().all(|v| *v > 0.0 && v.is_finite()) {
                    return Ok(CholFactor { chol, jitter });
                }
            }
        }
        Err(FusionError::NotPositiveDefinite { jitter: last })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn l(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `L^{-1} b`.
    pub fn solve_lower(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is positive")
    }

    pub fn solve_lower_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol
            .l_dirty()
            .solve_lower_triangular(b)
            .expect("cholesky diagonal is positive")
    }

    /// `L^{-T} b`: maps a standard normal draw to a draw with covariance `C^{-1}`.
    pub fn solve_upper_transpose(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol
            .l_dirty()
            .tr_solve_lower_triangular(b)
            .expect("cholesky diagonal is positive")
    }

    /// `L z`: maps a standard normal draw to a draw with covariance `C`.
    pub fn mul_lower(&self, z: &DVector<f64>) -> DVector<f64> {
        self.chol.l() * z
    }

    pub fn logdet(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `b^T C^{-1} b`.
    pub fn quad_form(&self, b: &DVector<f64>) -> f64 {
        self.solve_lower(b).norm_squared()
    }
}

pub fn chol_solve(c: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(CholFactor::new(c)?.solve(b))
}

pub fn chol_logdet(c: &DMatrix<f64>) -> Result<f64> {
    Ok(CholFactor::new(c)?.logdet())
}
