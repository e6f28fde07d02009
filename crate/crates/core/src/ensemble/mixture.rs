use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::kernels::dist::{normal_pdf, std_normal_cdf, std_normal_quantile};

/// `w N(mu1, var1) + (1 - w) N(mu2, var2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureDistribution {
    pub w: f64,
    pub mu1: f64,
    pub var1: f64,
    pub mu2: f64,
    pub var2: f64,
}

impl MixtureDistribution {
    pub fn new(w: f64, mu1: f64, var1: f64, mu2: f64, var2: f64) -> Self {
        MixtureDistribution {
            w,
            mu1,
            var1,
            mu2,
            var2,
        }
    }

    /// Single Normal written as a mixture with full weight on component 1.
    pub fn single(mu: f64, var: f64) -> Self {
        MixtureDistribution::new(1.0, mu, var, mu, var)
    }

    pub fn mean(&self) -> f64 {
        self.w * self.mu1 + (1.0 - self.w) * self.mu2
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let v = self.w * (self.var1 + (self.mu1 - m).powi(2)) + (1.0 - self.w) * (self.var2 + (self.mu2 - m).powi(2));
        v.max(0.0)
    }

    pub fn sd(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let mut c = 0.0;
        if self.w > 0.0 {
            c += self.w * std_normal_cdf((x - self.mu1) / self.var1.sqrt());
        }
        if self.w < 1.0 {
            c += (1.0 - self.w) * std_normal_cdf((x - self.mu2) / self.var2.sqrt());
        }
        c
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let mut f = 0.0;
        if self.w > 0.0 {
            f += self.w * normal_pdf(x, self.mu1, self.var1);
        }
        if self.w < 1.0 {
            f += (1.0 - self.w) * normal_pdf(x, self.mu2, self.var2);
        }
        f
    }

    /// Inverse CDF by safeguarded Newton iteration inside the bracket
    /// formed by the two component quantiles.
    pub fn quantile(&self, p: f64) -> f64 {
        if p <= 0.0 {
            return f64::NEG_INFINITY;
        }
        if p >= 1.0 {
            return f64::INFINITY;
        }
        let z = std_normal_quantile(p);
        let q1 = self.mu1 + self.var1.sqrt() * z;
        let q2 = self.mu2 + self.var2.sqrt() * z;
        if self.w >= 1.0 {
            return q1;
        }
        if self.w <= 0.0 {
            return q2;
        }
        let (mut lo, mut hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        if hi - lo <= 0.0 {
            return lo;
        }
        let mut x = self.w * q1 + (1.0 - self.w) * q2;
        for _ in 0..200 {
            let f = self.cdf(x) - p;
            if f.abs() < 1e-15 {
                return x;
            }
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let d = self.pdf(x);
            let newton = x - f / d;
            x = if d > 0.0 && newton > lo && newton < hi {
                newton
            } else {
                0.5 * (lo + hi)
            };
            if (hi - lo) <= 4.0 * f64::EPSILON * x.abs().max(1.0) {
                break;
            }
        }
        x
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5)
    }

    /// The same distribution with the components swapped and `w -> 1 - w`.
    pub fn swapped(&self) -> Self {
        MixtureDistribution::new(1.0 - self.w, self.mu2, self.var2, self.mu1, self.var1)
    }
}

/// Mixture at one site-day. When only one component is available the
/// weight collapses onto it.
pub fn predict_mixture(c1: Option<(f64, f64)>, c2: Option<(f64, f64)>, w: f64) -> Result<MixtureDistribution> {
    match (c1, c2) {
        (Some((m1, v1)), Some((m2, v2))) => Ok(MixtureDistribution::new(w.clamp(0.0, 1.0), m1, v1, m2, v2)),
        (Some((m1, v1)), None) => Ok(MixtureDistribution::new(1.0, m1, v1, m1, v1)),
        (None, Some((m2, v2))) => Ok(MixtureDistribution::new(0.0, m2, v2, m2, v2)),
        (None, None) => Err(FusionError::NoInputs {
            site: String::new(),
            day: 0,
        }),
    }
}
