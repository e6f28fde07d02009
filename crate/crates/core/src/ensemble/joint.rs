use super::steps::{update_q, update_rho, update_tau2, update_z, WeightPrior};
use super::{summarize_draws, EnsembleData, EnsembleMethod, SiteWeight, WeightField, WeightPosterior};
use crate::error::{FusionError, Result};
use crate::geo::distance_matrix;
use crate::kernels::dist::inv_logit;
use crate::mcmc::{AdaptiveScale, MCMCConfig};

const JOINT_STREAM: u64 = 0x10;

/// Switches for the weight sampler. Disabling likelihood terms turns the
/// chain into a prior sampler (used for correctness checks).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointOptions {
    pub use_z_likelihood: bool,
    pub use_rho_likelihood: bool,
    pub update_tau2: bool,
    pub update_rho: bool,
    pub init_tau2: f64,
    /// Defaults to a quarter of the site-set diameter.
    pub init_rho: Option<f64>,
}

impl Default for JointOptions {
    fn default() -> Self {
        JointOptions {
            use_z_likelihood: true,
            use_rho_likelihood: true,
            update_tau2: true,
            update_rho: true,
            init_tau2: 1.0,
            init_rho: None,
        }
    }
}

/// Systematic-sweep sampler over `z`, `q`, `tau2`, `rho`.
pub fn fit_joint(data: &EnsembleData, mcmc: &MCMCConfig, opts: JointOptions) -> Result<WeightPosterior> {
    mcmc.validate()?;
    let ns = data.n_sites();
    if ns == 0 {
        return Err(FusionError::InsufficientData("ensemble has no sites".into()));
    }
    let dist = distance_matrix(&data.sites);
    let diam = dist.diameter();
    let rho0 = opts.init_rho.unwrap_or(if diam > 0.0 {
        diam / 4.0
    } else {
        mcmc.rho_prior_shape / mcmc.rho_prior_rate
    });
    let mut prior = WeightPrior::new(&dist, rho0, opts.init_tau2)?;
    let mut rng = mcmc.rng(JOINT_STREAM);
    let mut q = vec![0.0; ns];
    let mut q_scales = vec![AdaptiveScale::new(mcmc.kappa_w); ns];
    let mut rho_scale = AdaptiveScale::new(mcmc.kappa_rho);
    let totals: Vec<usize> = data.records.iter().map(|r| r.len()).collect();
    let mut z = update_z(data, &q, &mut rng);
    let mut samples = Vec::with_capacity(mcmc.n_kept());
    let mut q_acc = 0usize;
    let mut q_prop = 0usize;
    for r in 0..mcmc.n_iter {
        if r == mcmc.burn_in || !mcmc.adapt {
            q_scales.iter_mut().for_each(|s| s.freeze());
            rho_scale.freeze();
        }
        if opts.use_z_likelihood {
            z = update_z(data, &q, &mut rng);
        }
        for s in 0..ns {
            let (ones, total) = if opts.use_z_likelihood {
                (z.ones(s), totals[s])
            } else {
                (0, 0)
            };
            let acc = update_q(s, ones, total, &mut q, &prior, q_scales[s].variance, &mut rng);
            q_scales[s].record(acc);
            if r >= mcmc.burn_in {
                q_prop += 1;
                q_acc += acc as usize;
            }
        }
        if opts.update_tau2 {
            prior.tau2 = update_tau2(&q, &prior, mcmc.ig_a, mcmc.ig_b, &mut rng);
        }
        if opts.update_rho {
            let next = update_rho(
                &q,
                &prior,
                rho_scale.variance,
                &dist,
                mcmc.rho_prior_shape,
                mcmc.rho_prior_rate,
                opts.use_rho_likelihood,
                &mut rng,
            );
            rho_scale.record(next.is_some());
            if let Some(p) = next {
                prior = p;
            }
        }
        if mcmc.keeps(r) {
            samples.push(WeightField {
                q: q.clone(),
                tau2: prior.tau2,
                rho: prior.rho,
            });
        }
    }
    let site_weights = (0..ns)
        .map(|s| {
            let mut w: Vec<f64> = samples.iter().map(|f| inv_logit(f.q[s])).collect();
            let q_mean = samples.iter().map(|f| f.q[s]).sum::<f64>() / samples.len() as f64;
            let (w_mean, w_lo, w_hi) = summarize_draws(&mut w);
            SiteWeight {
                w_mean,
                w_lo,
                w_hi,
                q_mean,
            }
        })
        .collect();
    Ok(WeightPosterior {
        method: EnsembleMethod::Joint,
        sites: data.sites.clone(),
        samples,
        site_weights,
        q_accept: (q_prop > 0).then(|| q_acc as f64 / q_prop as f64),
        rho_accept: rho_scale.acceptance_rate(),
    })
}
