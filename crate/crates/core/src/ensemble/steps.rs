//! The four conditional updates of the weight sampler.

use nalgebra::DVector;
use rand::Rng;

use super::{EnsembleData, LatentAssignment};
use crate::error::Result;
use crate::geo::DistanceMatrix;
use crate::kernels::dist::{gamma_logpdf, inv_logit, log1p_exp, normal_logpdf, sample_inv_gamma, std_normal};
use crate::kernels::{exp_cov_matrix, ExpCovParams, GaussianSummary, GpPrecision};

/// Probability that component 1 generated `y`, evaluated in log space.
pub fn z_probability(y: f64, mu1: f64, var1: f64, mu2: f64, var2: f64, w: f64) -> f64 {
    let l1 = w.ln() + normal_logpdf(y, mu1, var1);
    let l2 = (1.0 - w).ln() + normal_logpdf(y, mu2, var2);
    let d = l2 - l1;
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

/// Same probability from the raw densities; underflows for far-out `y`.
pub fn z_probability_direct(y: f64, mu1: f64, var1: f64, mu2: f64, var2: f64, w: f64) -> f64 {
    let f1 = (-(y - mu1).powi(2) / (2.0 * var1)).exp() / (2.0 * std::f64::consts::PI * var1).sqrt();
    let f2 = (-(y - mu2).powi(2) / (2.0 * var2)).exp() / (2.0 * std::f64::consts::PI * var2).sqrt();
    w * f1 / (w * f1 + (1.0 - w) * f2)
}

/// Step 1: Bernoulli draw of every latent indicator.
pub fn update_z<R: Rng + ?Sized>(data: &EnsembleData, q: &[f64], rng: &mut R) -> LatentAssignment {
    let z = data
        .records
        .iter()
        .zip(q)
        .map(|(rec, &qs)| {
            let w = inv_logit(qs);
            (0..rec.len())
                .map(|k| {
                    let p = z_probability(rec.y[k], rec.mu1[k], rec.var1[k], rec.mu2[k], rec.var2[k], w);
                    (rng.random::<f64>() < p) as u8
                })
                .collect()
        })
        .collect();
    LatentAssignment { z }
}

/// GP prior on the logit weights at one range: correlation precision and
/// the marginal variance.
#[derive(Debug, Clone)]
pub struct WeightPrior {
    pub rho: f64,
    pub tau2: f64,
    pub corr: GpPrecision,
}

impl WeightPrior {
    pub fn new(dist: &DistanceMatrix, rho: f64, tau2: f64) -> Result<Self> {
        let r = exp_cov_matrix(dist, &ExpCovParams::unit(rho)?);
        Ok(WeightPrior {
            rho,
            tau2,
            corr: GpPrecision::new(&r)?,
        })
    }

    /// Univariate conditional of `q[s]` given the other sites.
    pub fn conditional(&self, s: usize, q: &[f64]) -> GaussianSummary {
        let g = self.corr.conditional(s, q);
        GaussianSummary::new(g.mean, g.variance * self.tau2)
    }

    /// `q^T R^{-1} q`.
    pub fn quad(&self, q: &[f64]) -> f64 {
        let v = DVector::from_column_slice(q);
        v.dot(&(&self.corr.precision * &v))
    }

    /// Multivariate Normal log density of `q`, dropping `2 pi`.
    pub fn loglik(&self, q: &[f64]) -> f64 {
        let s = q.len() as f64;
        -0.5 * (s * self.tau2.ln() + self.corr.logdet_cov) - 0.5 * self.quad(q) / self.tau2
    }
}

/// Bernoulli log-likelihood of `n_ones` successes in `n_total` trials at logit `q`.
#[inline]
pub fn bernoulli_loglik(q: f64, n_ones: usize, n_total: usize) -> f64 {
    n_ones as f64 * q - n_total as f64 * log1p_exp(q)
}

/// Step 2: random-walk Metropolis on `q[s]` with proposal variance `kappa`.
pub fn update_q<R: Rng + ?Sized>(
    s: usize,
    n_ones: usize,
    n_total: usize,
    q: &mut [f64],
    prior: &WeightPrior,
    kappa: f64,
    rng: &mut R,
) -> bool {
    let current = q[s];
    let proposal = current + kappa.sqrt() * std_normal(rng);
    let h = prior.conditional(s, q);
    let log_ratio = bernoulli_loglik(proposal, n_ones, n_total) - bernoulli_loglik(current, n_ones, n_total)
        + normal_logpdf(proposal, h.mean, h.variance)
        - normal_logpdf(current, h.mean, h.variance);
    if rng.random::<f64>().ln() < log_ratio {
        q[s] = proposal;
        true
    } else {
        false
    }
}

/// Conjugate Inverse-Gamma `(shape, rate)` of the weight GP variance.
pub fn tau2_conditional(q: &[f64], prior: &WeightPrior, a: f64, b: f64) -> (f64, f64) {
    if q.is_empty() {
        return (a, b);
    }
    (a + 0.5 * q.len() as f64, b + 0.5 * prior.quad(q))
}

/// Step 3: exact draw of `tau2`, the correlation matrix factored out.
pub fn update_tau2<R: Rng + ?Sized>(q: &[f64], prior: &WeightPrior, a: f64, b: f64, rng: &mut R) -> f64 {
    let (shape, rate) = tau2_conditional(q, prior, a, b);
    sample_inv_gamma(rng, shape, rate)
}

/// Step 4: log-normal random walk on `rho`. Returns the new prior when the
/// proposal is accepted; a proposal whose covariance fails to factor is
/// rejected. With `use_likelihood = false` the chain targets the prior.
#[allow(clippy::too_many_arguments)]
pub fn update_rho<R: Rng + ?Sized>(
    q: &[f64],
    prior: &WeightPrior,
    kappa_rho: f64,
    dist: &DistanceMatrix,
    prior_shape: f64,
    prior_rate: f64,
    use_likelihood: bool,
    rng: &mut R,
) -> Option<WeightPrior> {
    let rho = prior.rho;
    let proposal = rho * (kappa_rho.sqrt() * std_normal(rng)).exp();
    if !(proposal.is_finite() && proposal > 0.0) {
        let _ = rng.random::<f64>();
        return None;
    }
    let cand = match WeightPrior::new(dist, proposal, prior.tau2) {
        Ok(c) => c,
        Err(_) => {
            let _ = rng.random::<f64>();
            return None;
        }
    };
    let mut log_ratio = gamma_logpdf(proposal, prior_shape, prior_rate) - gamma_logpdf(rho, prior_shape, prior_rate)
        + proposal.ln()
        - rho.ln();
    if use_likelihood {
        log_ratio += cand.loglik(q) - prior.loglik(q);
    }
    if rng.random::<f64>().ln() < log_ratio {
        Some(cand)
    } else {
        None
    }
}
