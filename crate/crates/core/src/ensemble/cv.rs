use std::collections::HashMap;

use rayon::prelude::*;

use super::{
    fit_joint, fit_two_stage, krige_weights, predict_mixture, EnsembleData, EnsembleMethod, JointOptions,
    MixtureDistribution, Observation, WeightPosterior,
};
use crate::downscaler::PredictiveInput;
use crate::error::{FusionError, Result};
use crate::geo::{Location, SourceTag};
use crate::mcmc::{stream_id, MCMCConfig};
use crate::metrics::FoldPlan;

/// Fits the weight field with either estimator.
pub fn fit_weights(data: &EnsembleData, method: EnsembleMethod, mcmc: &MCMCConfig) -> Result<WeightPosterior> {
    match method {
        EnsembleMethod::Joint => fit_joint(&data.nonempty(), mcmc, JointOptions::default()),
        EnsembleMethod::TwoStage => fit_two_stage(data, mcmc),
    }
}

/// Held-out mixture predictive for every observation, in input order.
///
/// For each fold the weights are fitted on the observations outside it,
/// kriged to the held-out sites, and mixed with that record's component
/// predictives. Mixing with the posterior mean weight is exact: the
/// predictive density is linear in `w`.
pub fn ensemble_cv_predict(
    obs: &[Observation],
    inputs: &PredictiveInput,
    sites: &[Location],
    folds: &FoldPlan,
    method: EnsembleMethod,
    mcmc: &MCMCConfig,
    max_samples: Option<usize>,
) -> Result<Vec<MixtureDistribution>> {
    let fold_of = folds.assign(obs.iter().map(|o| (o.site_id.as_str(), o.day)))?;
    let idx = inputs.index();
    let component = |o: &Observation, s: SourceTag| {
        idx.get(&(o.site_id.as_str(), o.day, s))
            .filter(|e| e.available)
            .map(|e| (e.mu, e.var))
    };
    let site_loc: HashMap<&str, &Location> = sites.iter().map(|l| (l.id.as_str(), l)).collect();
    let per_fold: Vec<Vec<(usize, MixtureDistribution)>> = (0..folds.n_folds)
        .into_par_iter()
        .map(|f| {
            let held: Vec<usize> = (0..obs.len()).filter(|&i| fold_of[i] == f).collect();
            if held.is_empty() {
                return Ok(Vec::new());
            }
            let train: Vec<Observation> = (0..obs.len())
                .filter(|&i| fold_of[i] != f)
                .map(|i| obs[i].clone())
                .collect();
            let data = EnsembleData::build(&train, inputs, sites)?;
            let cfg = mcmc.with_seed(stream_id(&[mcmc.seed, 0xe5, f as u64]));
            let post = fit_weights(&data, method, &cfg)?;
            let mut targets: Vec<Location> = Vec::new();
            let mut target_of: HashMap<&str, usize> = HashMap::new();
            for &i in &held {
                let id = obs[i].site_id.as_str();
                if !target_of.contains_key(id) {
                    let loc = site_loc
                        .get(id)
                        .ok_or_else(|| FusionError::InvalidConfig(format!("observation at unknown site `{id}`")))?;
                    target_of.insert(id, targets.len());
                    targets.push((*loc).clone());
                }
            }
            let w = krige_weights(&post, &targets, stream_id(&[cfg.seed, 0x6b]), max_samples)?;
            held.into_iter()
                .map(|i| {
                    let o = &obs[i];
                    let wm = w[target_of[o.site_id.as_str()]].w_mean;
                    let m = predict_mixture(component(o, SourceTag::Ctm), component(o, SourceTag::Sat), wm).map_err(
                        |_| FusionError::NoInputs {
                            site: o.site_id.clone(),
                            day: o.day,
                        },
                    )?;
                    Ok((i, m))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<Option<MixtureDistribution>> = vec![None; obs.len()];
    for (i, m) in per_fold.into_iter().flatten() {
        out[i] = Some(m);
    }
    Ok(out
        .into_iter()
        .map(|m| m.expect("every observation is in a fold"))
        .collect())
}
