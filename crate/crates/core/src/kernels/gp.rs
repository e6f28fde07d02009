//! Gaussian-process conditionals and simple kriging under the exponential
//! covariance.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::chol::{CholFactor, JitterPolicy};
use super::cov::{exp_cov_matrix, ExpCovParams};
use crate::error::Result;
use crate::geo::{cross_distances, distance_matrix, Location};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianSummary {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianSummary {
    pub fn new(mean: f64, variance: f64) -> Self {
        GaussianSummary {
            mean,
            variance: variance.max(0.0),
        }
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Conditional of site `i` given every other entry of `values`, computed by
/// partitioning `c` and factorizing the `(-i, -i)` block.
pub fn gp_univariate_conditional(i: usize, values: &DVector<f64>, c: &DMatrix<f64>) -> Result<GaussianSummary> {
    let n = c.nrows();
    if n == 1 {
        return Ok(GaussianSummary::new(0.0, c[(0, 0)]));
    }
    let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let c_oo = c.select_rows(&others).select_columns(&others);
    let c_io = DVector::from_iterator(others.len(), others.iter().map(|&j| c[(i, j)]));
    let q_o = DVector::from_iterator(others.len(), others.iter().map(|&j| values[j]));
    let f = CholFactor::new(&c_oo)?;
    let mean = c_io.dot(&f.solve(&q_o));
    let var = c[(i, i)] - f.quad_form(&c_io);
    Ok(GaussianSummary::new(mean, var))
}

/// Precision-matrix form of the GP prior, giving O(S) univariate
/// conditionals once `Q = C^{-1}` is known.
#[derive(Debug, Clone)]
pub struct GpPrecision {
    pub precision: DMatrix<f64>,
    pub logdet_cov: f64,
}

impl GpPrecision {
    pub fn new(c: &DMatrix<f64>) -> Result<Self> {
        let f = CholFactor::new(c)?;
        Ok(GpPrecision {
            precision: f.inverse(),
            logdet_cov: f.logdet(),
        })
    }

    pub fn len(&self) -> usize {
        self.precision.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.precision.nrows() == 0
    }

    /// Mean `-sum_{j != i} Q_ij q_j / Q_ii`, variance `1 / Q_ii`.
    pub fn conditional(&self, i: usize, values: &[f64]) -> GaussianSummary {
        let q = &self.precision;
        let qii = q[(i, i)];
        let mut acc = 0.0;
        for (j, v) in values.iter().enumerate() {
            if j != i {
                acc += q[(i, j)] * v;
            }
        }
        GaussianSummary::new(-acc / qii, 1.0 / qii)
    }
}

/// A factorized kriging system for one set of observed sites.
#[derive(Debug, Clone)]
pub struct Kriger {
    observed: Vec<Location>,
    params: ExpCovParams,
    factor: CholFactor,
}

impl Kriger {
    pub fn new(observed: &[Location], params: ExpCovParams) -> Result<Self> {
        Self::with_policy(observed, params, JitterPolicy::default())
    }

    pub fn with_policy(observed: &[Location], params: ExpCovParams, policy: JitterPolicy) -> Result<Self> {
        params.validate()?;
        let c = exp_cov_matrix(&distance_matrix(observed), &params);
        let factor = CholFactor::with_policy(&c, policy)?;
        Ok(Kriger {
            observed: observed.to_vec(),
            params,
            factor,
        })
    }

    pub fn factor(&self) -> &CholFactor {
        &self.factor
    }

    /// Simple-kriging mean and variance at each target under a constant
    /// prior mean.
    pub fn predict(&self, values: &[f64], mean: f64, targets: &[Location]) -> Vec<GaussianSummary> {
        let resid = DVector::from_iterator(values.len(), values.iter().map(|v| v - mean));
        let alpha = self.factor.solve_lower(&resid);
        let mut out = Vec::with_capacity(targets.len());
        for chunk in targets.chunks(2048) {
            let k = cross_distances(&self.observed, chunk).map(|d| self.params.cov(d));
            let v = self.factor.solve_lower_mat(&k);
            for j in 0..chunk.len() {
                let col = v.column(j);
                let m = mean + col.dot(&alpha);
                let var = self.params.marginal_variance - col.norm_squared();
                out.push(GaussianSummary::new(m, var));
            }
        }
        out
    }
}

pub fn krige(
    observed: &[Location],
    values: &[f64],
    targets: &[Location],
    params: &ExpCovParams,
    mean: f64,
) -> Result<Vec<GaussianSummary>> {
    Ok(Kriger::new(observed, *params)?.predict(values, mean, targets))
}
