//! Two-stage weight estimation: independent Beta-Bernoulli fits per site,
//! then a GP fitted to the logit of the per-site posterior medians.

use rand::Rng;
use rayon::prelude::*;

use super::steps::{update_rho, update_tau2, z_probability, WeightPrior};
use super::{summarize_draws, EnsembleData, EnsembleMethod, SiteRecords, SiteWeight, WeightField, WeightPosterior};
use crate::error::{FusionError, Result};
use crate::geo::distance_matrix;
use crate::kernels::dist::{logit, sample_beta};
use crate::mcmc::{stream_id, AdaptiveScale, ChainRng, MCMCConfig};

const STAGE_A_STREAM: u64 = 0x20;
const STAGE_B_STREAM: u64 = 0x21;

/// Stage-A posterior of one site's weight under a Beta(1, 1) prior.
#[derive(Debug, Clone, PartialEq)]
pub struct StageASummary {
    /// Posterior mean, Rao-Blackwellized over the retained `z` draws.
    pub mean: f64,
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
    pub draws: Vec<f64>,
}

/// Data-augmentation Gibbs sampler for one site.
pub fn stage_a_site(rec: &SiteRecords, mcmc: &MCMCConfig, rng: &mut ChainRng) -> StageASummary {
    let t = rec.len();
    let mut w = 0.5;
    let mut draws = Vec::with_capacity(mcmc.n_kept());
    let mut rb = 0.0;
    for r in 0..mcmc.n_iter {
        let mut ones = 0usize;
        for k in 0..t {
            let p = z_probability(rec.y[k], rec.mu1[k], rec.var1[k], rec.mu2[k], rec.var2[k], w);
            if rng.random::<f64>() < p {
                ones += 1;
            }
        }
        let a = 1.0 + ones as f64;
        let b = 1.0 + (t - ones) as f64;
        w = sample_beta(rng, a, b);
        if mcmc.keeps(r) {
            draws.push(w);
            rb += a / (a + b);
        }
    }
    let n = draws.len() as f64;
    let mut sorted = draws.clone();
    let (_, lo, hi) = summarize_draws(&mut sorted);
    let median = super::empirical_quantile(&sorted, 0.5);
    StageASummary {
        mean: rb / n,
        median,
        lo,
        hi,
        draws,
    }
}

pub fn fit_two_stage(data: &EnsembleData, mcmc: &MCMCConfig) -> Result<WeightPosterior> {
    mcmc.validate()?;
    let used = data.nonempty();
    if used.n_sites() == 0 {
        return Err(FusionError::InsufficientData(
            "no site has records with both components".into(),
        ));
    }
    let stage_a: Vec<StageASummary> = used
        .records
        .par_iter()
        .enumerate()
        .map(|(s, rec)| {
            let mut rng = mcmc.rng(stream_id(&[STAGE_A_STREAM, s as u64]));
            stage_a_site(rec, mcmc, &mut rng)
        })
        .collect();
    let q_hat: Vec<f64> = stage_a
        .iter()
        .map(|a| logit(a.median.clamp(1e-9, 1.0 - 1e-9)))
        .collect::<Result<_>>()?;

    let dist = distance_matrix(&used.sites);
    let diam = dist.diameter();
    let rho0 = if diam > 0.0 {
        diam / 4.0
    } else {
        mcmc.rho_prior_shape / mcmc.rho_prior_rate
    };
    let mut prior = WeightPrior::new(&dist, rho0, 1.0)?;
    let mut rng = mcmc.rng(STAGE_B_STREAM);
    let mut rho_scale = AdaptiveScale::new(mcmc.kappa_rho);
    let mut samples = Vec::with_capacity(mcmc.n_kept());
    for r in 0..mcmc.n_iter {
        if r == mcmc.burn_in || !mcmc.adapt {
            rho_scale.freeze();
        }
        prior.tau2 = update_tau2(&q_hat, &prior, mcmc.ig_a, mcmc.ig_b, &mut rng);
        let next = update_rho(
            &q_hat,
            &prior,
            rho_scale.variance,
            &dist,
            mcmc.rho_prior_shape,
            mcmc.rho_prior_rate,
            true,
            &mut rng,
        );
        rho_scale.record(next.is_some());
        if let Some(p) = next {
            prior = p;
        }
        if mcmc.keeps(r) {
            samples.push(WeightField {
                q: q_hat.clone(),
                tau2: prior.tau2,
                rho: prior.rho,
            });
        }
    }
    let site_weights = stage_a
        .iter()
        .zip(&q_hat)
        .map(|(a, &q)| SiteWeight {
            w_mean: a.mean,
            w_lo: a.lo,
            w_hi: a.hi,
            q_mean: q,
        })
        .collect();
    Ok(WeightPosterior {
        method: EnsembleMethod::TwoStage,
        sites: used.sites,
        samples,
        site_weights,
        q_accept: None,
        rho_accept: rho_scale.acceptance_rate(),
    })
}
