//! Interpolation of the weight field to unmonitored locations.

use nalgebra::DVector;
use rayon::prelude::*;

use super::{summarize_draws, SiteWeight, WeightPosterior};
use crate::error::{FusionError, Result};
use crate::geo::{cross_distances, distance_matrix, Location};
use crate::kernels::dist::{inv_logit, std_normal};
use crate::kernels::{exp_cov_matrix, CholFactor, ExpCovParams};
use crate::mcmc::stream_rng;

/// Posterior summary of `w` at one target location.
pub type WeightSummary = SiteWeight;

const TARGET_CHUNK: usize = 512;

/// For each retained draw, kriges `q` to the targets (prior mean 0 on the
/// logit scale), draws from the kriging distribution and maps through the
/// logistic function. Uses at most `max_samples` evenly spaced draws.
pub fn krige_weights(
    post: &WeightPosterior,
    targets: &[Location],
    seed: u64,
    max_samples: Option<usize>,
) -> Result<Vec<WeightSummary>> {
    if let Some(t) = targets.iter().find(|t| !t.x.is_finite() || !t.y.is_finite()) {
        return Err(FusionError::InvalidConfig(format!(
            "target `{}` has non-finite coordinates",
            t.id
        )));
    }
    let n = post.samples.len();
    if n == 0 {
        return Err(FusionError::InsufficientData("weight posterior has no samples".into()));
    }
    let picks: Vec<usize> = match max_samples {
        Some(m) if m > 0 && m < n => (0..m).map(|k| k * n / m).collect(),
        _ => (0..n).collect(),
    };
    let dist = distance_matrix(&post.sites);
    let systems: Vec<(CholFactor, DVector<f64>, ExpCovParams)> = picks
        .par_iter()
        .map(|&k| {
            let f = &post.samples[k];
            let p = ExpCovParams::new(f.tau2, f.rho)?;
            let factor = CholFactor::new(&exp_cov_matrix(&dist, &p))?;
            let alpha = factor.solve_lower(&DVector::from_column_slice(&f.q));
            Ok((factor, alpha, p))
        })
        .collect::<Result<_>>()?;
    let chunks: Vec<Vec<WeightSummary>> = targets
        .par_chunks(TARGET_CHUNK)
        .enumerate()
        .map(|(c, chunk)| {
            let mut rng = stream_rng(seed, 0x4b52_0000 + c as u64);
            let d = cross_distances(&post.sites, chunk);
            let mut w_draws = vec![Vec::with_capacity(systems.len()); chunk.len()];
            let mut q_sum = vec![0.0; chunk.len()];
            for (factor, alpha, p) in &systems {
                let k = d.map(|v| p.cov(v));
                let v = factor.solve_lower_mat(&k);
                for j in 0..chunk.len() {
                    let col = v.column(j);
                    let mean = col.dot(alpha);
                    let var = (p.marginal_variance - col.norm_squared()).max(0.0);
                    let q = mean + var.sqrt() * std_normal(&mut rng);
                    q_sum[j] += mean;
                    w_draws[j].push(inv_logit(q));
                }
            }
            w_draws
                .iter_mut()
                .zip(q_sum)
                .map(|(w, qs)| {
                    let (w_mean, w_lo, w_hi) = summarize_draws(w);
                    SiteWeight {
                        w_mean,
                        w_lo,
                        w_hi,
                        q_mean: qs / systems.len() as f64,
                    }
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{EnsembleMethod, WeightField};

    fn posterior() -> WeightPosterior {
        let sites: Vec<Location> = (0..5)
            .map(|i| Location::new(format!("s{i}"), 40.0 * i as f64, 10.0 * i as f64))
            .collect();
        let samples: Vec<WeightField> = (0..200)
            .map(|k| {
                let t = k as f64 / 200.0;
                WeightField {
                    q: vec![1.5 + t, 0.5, -0.3 * t, -1.0, 2.0 - t],
                    tau2: 0.8 + 0.4 * t,
                    rho: 80.0 + 40.0 * t,
                }
            })
            .collect();
        let site_weights = (0..5)
            .map(|s| {
                let mut w: Vec<f64> = samples.iter().map(|f| inv_logit(f.q[s])).collect();
                let (w_mean, w_lo, w_hi) = summarize_draws(&mut w);
                SiteWeight {
                    w_mean,
                    w_lo,
                    w_hi,
                    q_mean: 0.0,
                }
            })
            .collect();
        WeightPosterior {
            method: EnsembleMethod::Joint,
            sites,
            samples,
            site_weights,
            q_accept: None,
            rho_accept: 0.0,
        }
    }

    #[test]
    fn exact_at_monitors() {
        let post = posterior();
        let out = krige_weights(&post, &post.sites, 7, None).unwrap();
        for (o, s) in out.iter().zip(&post.site_weights) {
            assert!((o.w_mean - s.w_mean).abs() < 1e-3, "{} vs {}", o.w_mean, s.w_mean);
        }
    }

    #[test]
    fn far_field_reverts_to_half() {
        let post = posterior();
        let far = [Location::new("far", 1e5, -1e5)];
        let out = krige_weights(&post, &far, 7, None).unwrap();
        assert!((out[0].w_mean - 0.5).abs() < 0.05, "{}", out[0].w_mean);
        assert!(out[0].q_mean.abs() < 1e-12);
        assert!(out[0].w_lo < 0.2 && out[0].w_hi > 0.8);
    }

    #[test]
    fn chunking_and_subsampling_are_deterministic() {
        let post = posterior();
        let targets: Vec<Location> = (0..1200)
            .map(|i| Location::new(format!("t{i}"), i as f64 * 0.2, 3.0))
            .collect();
        let a = krige_weights(&post, &targets, 1, Some(50)).unwrap();
        let b = krige_weights(&post, &targets, 1, Some(50)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|w| (0.0..=1.0).contains(&w.w_lo) && w.w_lo <= w.w_hi));
        let bad = [Location::new("nan", f64::NAN, 0.0)];
        assert!(krige_weights(&post, &bad, 1, None).is_err());
    }
}
