use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::geo::DistanceMatrix;

/// Exponential covariance `marginal_variance * exp(-d / range)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpCovParams {
    pub marginal_variance: f64,
    pub range: f64,
}

impl ExpCovParams {
    pub fn new(marginal_variance: f64, range: f64) -> Result<Self> {
        let p = ExpCovParams {
            marginal_variance,
            range,
        };
        p.validate()?;
        Ok(p)
    }

    /// Unit marginal variance, used for the latent coregionalization processes.
    pub fn unit(range: f64) -> Result<Self> {
        Self::new(1.0, range)
    }

    // negated comparisons also reject NaN
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.marginal_variance >= 0.0) || !self.marginal_variance.is_finite() {
            return Err(FusionError::InvalidConfig(format!(
                "marginal variance must be >= 0, got {}",
                self.marginal_variance
            )));
        }
        if !(self.range > 0.0) {
            return Err(FusionError::InvalidConfig(format!(
                "range must be > 0, got {}",
                self.range
            )));
        }
        Ok(())
    }

    #[inline]
    pub fn cov(&self, d: f64) -> f64 {
        self.marginal_variance * exp_corr(d, self.range)
    }
}

#[inline]
pub fn exp_corr(d: f64, range: f64) -> f64 {
    (-d / range).exp()
}

pub fn exp_cov_matrix(d: &DistanceMatrix, p: &ExpCovParams) -> DMatrix<f64> {
    d.0.map(|v| p.cov(v))
}
