use rayon::prelude::*;

use super::{fit_downscaler, predict_at, ObservationTable, PredictTarget, PredictiveEntry, PredictiveInput};
use crate::error::{FusionError, Result};
use crate::geo::SourceTag;
use crate::mcmc::{stream_id, MCMCConfig};
use crate::metrics::FoldPlan;

/// Out-of-sample predictives for every record: each fold is fitted on the
/// usable records outside it and predicts the records inside it. Records
/// without a value for `source` come back unavailable. Folds run in
/// parallel with independent, fold-indexed seeds.
pub fn cv_predict(
    data: &ObservationTable,
    folds: &FoldPlan,
    source: SourceTag,
    mcmc: &MCMCConfig,
    max_samples: Option<usize>,
) -> Result<PredictiveInput> {
    let fold_of = folds.assign((0..data.len()).map(|i| data.record_key(i)))?;
    let results: Vec<Vec<(usize, PredictiveEntry)>> = (0..folds.n_folds)
        .into_par_iter()
        .map(|f| {
            let held: Vec<usize> = (0..data.len()).filter(|&i| fold_of[i] == f).collect();
            if held.is_empty() {
                return Ok(Vec::new());
            }
            let train: Vec<usize> = (0..data.len())
                .filter(|&i| fold_of[i] != f && data.records[i].x(source).is_some())
                .collect();
            if train.is_empty() {
                return Err(FusionError::InsufficientData(format!(
                    "fold {f} has no {source} training records"
                )));
            }
            let cfg = mcmc.with_seed(stream_id(&[mcmc.seed, 0xc5, f as u64]));
            let fit = fit_downscaler(&data.subset(&train), source, &cfg)?;
            let targets: Vec<PredictTarget> = held
                .iter()
                .map(|&i| {
                    let r = &data.records[i];
                    PredictTarget {
                        location: data.sites[r.site].clone(),
                        day: r.day,
                        x: r.x(source),
                        z: r.z,
                    }
                })
                .collect();
            let out = predict_at(&targets, &fit, max_samples)?;
            Ok(held.into_iter().zip(out).collect())
        })
        .collect::<Result<_>>()?;
    let mut entries: Vec<Option<PredictiveEntry>> = vec![None; data.len()];
    for (i, e) in results.into_iter().flatten() {
        entries[i] = Some(e);
    }
    Ok(PredictiveInput::new(
        entries
            .into_iter()
            .map(|e| e.expect("every record is in a fold"))
            .collect(),
    ))
}
