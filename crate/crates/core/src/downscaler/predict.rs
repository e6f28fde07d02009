//! Posterior predictive means and variances at arbitrary site-days.
//!
//! For every retained draw the latent effects at a new location are
//! kriged from the draw's `v1`, `v2` (unit-variance GPs with the draw's
//! ranges); their conditional variance enters the predictive variance
//! analytically instead of through an extra random draw.

use nalgebra::DVector;
use rayon::prelude::*;

use super::{Covariates, DownscalerFit, DownscalerState, PredictiveEntry};
use crate::error::{FusionError, Result};
use crate::geo::{cross_distances, distance_matrix, Location};
use crate::kernels::{exp_cov_matrix, CholFactor, ExpCovParams};

const LOC_CHUNK: usize = 64;

/// One requested prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictTarget {
    pub location: Location,
    pub day: i64,
    /// Linked gridded value; `None` when the source is missing there.
    pub x: Option<f64>,
    pub z: Covariates,
}

/// Dense prediction request over locations x days with static covariates.
#[derive(Debug, Clone)]
pub struct GridTargets {
    pub locations: Vec<Location>,
    pub days: Vec<i64>,
    /// Row-major `[location][day]`; `NaN` marks a missing source value.
    pub x: Vec<f64>,
    /// One covariate vector per location; `None` uses the training means.
    pub z: Option<Vec<Covariates>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Predictive {
    pub mu: f64,
    pub var: f64,
}

#[derive(Debug, Clone, Copy)]
struct Item {
    t: usize,
    x: f64,
    z: usize,
    out: usize,
}

struct Block {
    location: Location,
    fit_site: Option<usize>,
    items: Vec<Item>,
}

/// Per-draw kriging system for both latent processes.
struct DrawKrige {
    f1: CholFactor,
    a1: DVector<f64>,
    f2: CholFactor,
    a2: DVector<f64>,
}

fn sample_subset(fit: &DownscalerFit, max_samples: Option<usize>) -> Vec<&DownscalerState> {
    let n = fit.samples.len();
    match max_samples {
        Some(m) if m > 0 && m < n => (0..m).map(|k| &fit.samples[k * n / m]).collect(),
        _ => fit.samples.iter().collect(),
    }
}

fn draw_systems(fit: &DownscalerFit, draws: &[&DownscalerState]) -> Result<Vec<DrawKrige>> {
    let dist = distance_matrix(&fit.sites);
    draws
        .par_iter()
        .map(|s| {
            let c1 = exp_cov_matrix(&dist, &ExpCovParams::unit(s.theta1)?);
            let c2 = exp_cov_matrix(&dist, &ExpCovParams::unit(s.theta2)?);
            let f1 = CholFactor::new(&c1)?;
            let f2 = CholFactor::new(&c2)?;
            let a1 = f1.solve_lower(&DVector::from_column_slice(&s.v1));
            let a2 = f2.solve_lower(&DVector::from_column_slice(&s.v2));
            Ok(DrawKrige { f1, a1, f2, a2 })
        })
        .collect()
}

fn predict_blocks(
    fit: &DownscalerFit,
    draws: &[&DownscalerState],
    blocks: &[Block],
    z_table: &[Vec<f64>],
    n_out: usize,
) -> Result<Vec<Predictive>> {
    if draws.is_empty() {
        return Err(FusionError::InsufficientData("fit has no retained samples".into()));
    }
    let needs_krige = blocks.iter().any(|b| b.fit_site.is_none());
    let systems = if needs_krige {
        draw_systems(fit, draws)?
    } else {
        Vec::new()
    };
    let chunk_results: Vec<Vec<(usize, Predictive)>> = blocks
        .par_chunks(LOC_CHUNK)
        .map(|chunk| predict_chunk(fit, draws, &systems, chunk, z_table))
        .collect();
    let mut out = vec![
        Predictive {
            mu: f64::NAN,
            var: f64::NAN
        };
        n_out
    ];
    for chunk in chunk_results {
        for (slot, p) in chunk {
            out[slot] = p;
        }
    }
    Ok(out)
}

fn predict_chunk(
    fit: &DownscalerFit,
    draws: &[&DownscalerState],
    systems: &[DrawKrige],
    chunk: &[Block],
    z_table: &[Vec<f64>],
) -> Vec<(usize, Predictive)> {
    let new_locs: Vec<Location> = chunk
        .iter()
        .filter(|b| b.fit_site.is_none())
        .map(|b| b.location.clone())
        .collect();
    let dists = if new_locs.is_empty() {
        None
    } else {
        Some(cross_distances(&fit.sites, &new_locs))
    };
    let n_items: usize = chunk.iter().map(|b| b.items.len()).sum();
    let mut shift = vec![0.0; n_items];
    let mut sum_d = vec![0.0; n_items];
    let mut sum_d2 = vec![0.0; n_items];
    let mut sum_var = vec![0.0; n_items];
    // (v1 mean, v1 var, v2 mean, v2 var) per block for the current draw
    let mut latent = vec![(0.0, 0.0, 0.0, 0.0); chunk.len()];
    for (j, st) in draws.iter().enumerate() {
        if let Some(d) = &dists {
            let sys = &systems[j];
            let k1 = d.map(|v| (-v / st.theta1).exp());
            let k2 = d.map(|v| (-v / st.theta2).exp());
            let w1 = sys.f1.solve_lower_mat(&k1);
            let w2 = sys.f2.solve_lower_mat(&k2);
            let mut col = 0;
            for (b, block) in chunk.iter().enumerate() {
                if block.fit_site.is_none() {
                    let c1 = w1.column(col);
                    let c2 = w2.column(col);
                    latent[b] = (
                        c1.dot(&sys.a1),
                        (1.0 - c1.norm_squared()).max(0.0),
                        c2.dot(&sys.a2),
                        (1.0 - c2.norm_squared()).max(0.0),
                    );
                    col += 1;
                }
            }
        }
        let mut k = 0;
        for (b, block) in chunk.iter().enumerate() {
            let (m1, c1, m2, c2) = match block.fit_site {
                Some(s) => (st.v1[s], 0.0, st.v2[s], 0.0),
                None => latent[b],
            };
            for item in &block.items {
                let mu = st.mean_with_latent(item.t, m1, m2, item.x, &z_table[item.z]);
                let d1 = st.a[0] + st.a[1] * item.x;
                let d2 = st.a[2] * item.x;
                let var = st.sigma2_y + d1 * d1 * c1 + d2 * d2 * c2;
                if j == 0 {
                    shift[k] = mu;
                }
                let dm = mu - shift[k];
                sum_d[k] += dm;
                sum_d2[k] += dm * dm;
                sum_var[k] += var;
                k += 1;
            }
        }
    }
    let n = draws.len() as f64;
    let mut out = Vec::with_capacity(n_items);
    let mut k = 0;
    for block in chunk {
        for item in &block.items {
            let md = sum_d[k] / n;
            let between = (sum_d2[k] / n - md * md).max(0.0);
            out.push((
                item.out,
                Predictive {
                    mu: shift[k] + md,
                    var: between + sum_var[k] / n,
                },
            ));
            k += 1;
        }
    }
    out
}

fn day_index(fit: &DownscalerFit, day: i64) -> Result<usize> {
    if day < fit.first_day || day >= fit.first_day + fit.n_days as i64 {
        return Err(FusionError::InvalidConfig(format!(
            "day {day} outside the fitted calendar {}..{}",
            fit.first_day,
            fit.first_day + fit.n_days as i64
        )));
    }
    Ok((day - fit.first_day) as usize)
}

/// Matches a location to a training site by id and coordinates.
fn fit_site_of(fit: &DownscalerFit, lookup: &std::collections::HashMap<&str, usize>, loc: &Location) -> Option<usize> {
    lookup
        .get(loc.id.as_str())
        .copied()
        .filter(|&s| fit.sites[s].x == loc.x && fit.sites[s].y == loc.y)
}

/// Posterior predictive `(mu, var)` at each target; targets without a
/// linked source value come back unavailable.
pub fn predict_at(
    targets: &[PredictTarget],
    fit: &DownscalerFit,
    max_samples: Option<usize>,
) -> Result<Vec<PredictiveEntry>> {
    let lookup = fit.site_lookup();
    let p = fit.n_covariates();
    let mut blocks: Vec<Block> = Vec::new();
    let mut block_of: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
    let mut z_table: Vec<Vec<f64>> = Vec::new();
    for (i, t) in targets.iter().enumerate() {
        let Some(x) = t.x else { continue };
        if !x.is_finite() {
            continue;
        }
        let ti = day_index(fit, t.day)?;
        let b = *block_of.entry(t.location.id.as_str()).or_insert_with(|| {
            blocks.push(Block {
                location: t.location.clone(),
                fit_site: fit_site_of(fit, &lookup, &t.location),
                items: Vec::new(),
            });
            blocks.len() - 1
        });
        let mut zs = vec![0.0; p];
        fit.standardize(&t.z, &mut zs);
        z_table.push(zs);
        blocks[b].items.push(Item {
            t: ti,
            x,
            z: z_table.len() - 1,
            out: i,
        });
    }
    let draws = sample_subset(fit, max_samples);
    let preds = predict_blocks(fit, &draws, &blocks, &z_table, targets.len())?;
    Ok(targets
        .iter()
        .zip(preds)
        .map(|(t, p)| {
            if t.x.is_some_and(f64::is_finite) {
                PredictiveEntry {
                    site_id: t.location.id.clone(),
                    day: t.day,
                    source: fit.source,
                    mu: p.mu,
                    var: p.var,
                    available: true,
                }
            } else {
                PredictiveEntry::unavailable(t.location.id.clone(), t.day, fit.source)
            }
        })
        .collect())
}

/// Dense grid prediction; output is row-major `[location][day]`, `None`
/// where the source value is missing.
pub fn predict_grid(
    targets: &GridTargets,
    fit: &DownscalerFit,
    max_samples: Option<usize>,
) -> Result<Vec<Option<Predictive>>> {
    let n_days = targets.days.len();
    if targets.x.len() != targets.locations.len() * n_days {
        return Err(FusionError::InvalidConfig(
            "grid target values do not match locations x days".into(),
        ));
    }
    let day_idx: Vec<usize> = targets.days.iter().map(|&d| day_index(fit, d)).collect::<Result<_>>()?;
    let lookup = fit.site_lookup();
    let p = fit.n_covariates();
    let mut z_table = Vec::with_capacity(targets.locations.len().max(1));
    if targets.z.is_none() {
        z_table.push(vec![0.0; p]);
    }
    let mut blocks = Vec::with_capacity(targets.locations.len());
    for (l, loc) in targets.locations.iter().enumerate() {
        let z = match &targets.z {
            Some(zs) => {
                let mut v = vec![0.0; p];
                fit.standardize(&zs[l], &mut v);
                z_table.push(v);
                z_table.len() - 1
            }
            None => 0,
        };
        let items = (0..n_days)
            .filter_map(|k| {
                let x = targets.x[l * n_days + k];
                x.is_finite().then_some(Item {
                    t: day_idx[k],
                    x,
                    z,
                    out: l * n_days + k,
                })
            })
            .collect();
        blocks.push(Block {
            location: loc.clone(),
            fit_site: fit_site_of(fit, &lookup, loc),
            items,
        });
    }
    let draws = sample_subset(fit, max_samples);
    let preds = predict_blocks(fit, &draws, &blocks, &z_table, targets.x.len())?;
    Ok(targets
        .x
        .iter()
        .zip(preds)
        .map(|(x, p)| x.is_finite().then_some(p))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::downscaler::fit_downscaler;
    use crate::geo::{GridSpec, SourceTag};
    use crate::kernels::dist::std_normal;
    use crate::kernels::gp_univariate_conditional;
    use crate::mcmc::{stream_rng, MCMCConfig};
    use crate::synth::{generate_scene, Response, SceneConfig, SceneTruth, SourceTruth};

    fn scene(sigma2_y: f64, seed: u64) -> SceneTruth {
        let cfg = SceneConfig {
            n_sites: 12,
            n_days: 25,
            ctm_grid: GridSpec::new(0.0, 0.0, 20.0, 15, 15, SourceTag::Ctm).unwrap(),
            sat_grid: GridSpec::new(0.0, 0.0, 10.0, 30, 30, SourceTag::Sat).unwrap(),
            ctm: SourceTruth {
                sigma2_y,
                ..SourceTruth::ctm_default()
            },
            response: Response::Source(SourceTag::Ctm),
            full_grids: false,
            seed,
            ..SceneConfig::default()
        };
        generate_scene(&cfg).unwrap()
    }

    fn target_of(t: &SceneTruth, i: usize) -> PredictTarget {
        let r = &t.table.records[i];
        PredictTarget {
            location: t.sites[r.site].clone(),
            day: r.day,
            x: Some(r.x_ctm),
            z: r.z,
        }
    }

    #[test]
    fn interpolates_observed_monitor_day() {
        let t = scene(1e-4, 1);
        let fit = fit_downscaler(&t.table, SourceTag::Ctm, &MCMCConfig::short(1500, 750, 3)).unwrap();
        let idx: Vec<usize> = (0..t.table.len()).step_by(37).collect();
        let targets: Vec<_> = idx.iter().map(|&i| target_of(&t, i)).collect();
        let out = predict_at(&targets, &fit, None).unwrap();
        for (e, &i) in out.iter().zip(&idx) {
            let y = t.table.records[i].y;
            assert!(
                (e.mu - y).abs() < 2.0 * e.var.sqrt() + 1e-9,
                "{} vs {y} (sd {})",
                e.mu,
                e.var.sqrt()
            );
        }
    }

    #[test]
    fn missing_source_value_is_unavailable() {
        let t = scene(1.0, 2);
        let fit = fit_downscaler(&t.table, SourceTag::Ctm, &MCMCConfig::short(40, 20, 1)).unwrap();
        let mut tg = target_of(&t, 0);
        tg.x = None;
        let out = predict_at(&[tg.clone(), target_of(&t, 1)], &fit, None).unwrap();
        assert!(!out[0].available && out[0].mu.is_nan());
        assert!(out[1].available && out[1].var > 0.0);
        tg.x = Some(1.0);
        tg.day = 10_000;
        assert!(predict_at(&[tg], &fit, None).is_err());
    }

    /// Per-draw predictions at training sites: the reported variance is the
    /// empirical variance of the draw means plus the mean residual variance.
    #[test]
    fn variance_decomposition_at_monitors() {
        let t = scene(1.0, 3);
        let fit = fit_downscaler(&t.table, SourceTag::Ctm, &MCMCConfig::short(400, 200, 2)).unwrap();
        let targets: Vec<_> = (0..10).map(|k| target_of(&t, k * 29)).collect();
        let out = predict_at(&targets, &fit, None).unwrap();
        let lookup = fit.site_lookup();
        for (tg, e) in targets.iter().zip(&out) {
            let s = lookup[tg.location.id.as_str()];
            let d = (tg.day - fit.first_day) as usize;
            let preds: Vec<f64> = fit
                .samples
                .iter()
                .map(|st| st.mean_with_latent(d, st.v1[s], st.v2[s], tg.x.unwrap(), &[]))
                .collect();
            let n = preds.len() as f64;
            let m = preds.iter().sum::<f64>() / n;
            let v = preds.iter().map(|p| (p - m).powi(2)).sum::<f64>() / n;
            let want = v + fit.posterior_mean_sigma2_y();
            assert!((e.mu - m).abs() < 1e-9 * m.abs().max(1.0));
            assert!((e.var - want).abs() < 1e-9 * want, "{} vs {want}", e.var);
        }
    }

    /// At a new location, resample the latent values from their GP
    /// conditional per draw and compare with the analytic variance.
    #[test]
    fn variance_decomposition_by_resampling() {
        let t = scene(1.0, 4);
        let fit = fit_downscaler(&t.table, SourceTag::Ctm, &MCMCConfig::short(400, 200, 4)).unwrap();
        let mut rng = stream_rng(8, 0);
        let reps = 200;
        for k in 0..10 {
            let loc = Location::new(format!("new{k}"), 60.0 + 20.0 * k as f64, 150.0 - 7.0 * k as f64);
            let tg = PredictTarget {
                location: loc.clone(),
                day: 3 + k as i64,
                x: Some(8.0 + k as f64),
                z: [0.0; 6],
            };
            let e = &predict_at(std::slice::from_ref(&tg), &fit, None).unwrap()[0];
            let mut all = fit.sites.clone();
            all.push(loc);
            let dist = distance_matrix(&all);
            let last = all.len() - 1;
            let mut preds = Vec::new();
            for st in &fit.samples {
                let cond = |theta: f64, v: &[f64]| {
                    let c = exp_cov_matrix(&dist, &ExpCovParams::unit(theta).unwrap());
                    gp_univariate_conditional(last, &DVector::from_column_slice(v).push(0.0), &c).unwrap()
                };
                let g1 = cond(st.theta1, &st.v1);
                let g2 = cond(st.theta2, &st.v2);
                for _ in 0..reps {
                    let v1 = g1.mean + g1.sd() * std_normal(&mut rng);
                    let v2 = g2.mean + g2.sd() * std_normal(&mut rng);
                    preds.push(st.mean_with_latent(3 + k, v1, v2, tg.x.unwrap(), &[]));
                }
            }
            let n = preds.len() as f64;
            let m = preds.iter().sum::<f64>() / n;
            let v = preds.iter().map(|p| (p - m).powi(2)).sum::<f64>() / n;
            let want = v + fit.posterior_mean_sigma2_y();
            assert!((e.var - want).abs() < 0.03 * want, "{} vs {want}", e.var);
            assert!((e.mu - m).abs() < 4.0 * (v / n).sqrt() + 1e-9);
        }
    }

    #[test]
    fn grid_matches_point_prediction() {
        let t = scene(1.0, 5);
        let fit = fit_downscaler(&t.table, SourceTag::Ctm, &MCMCConfig::short(200, 100, 2)).unwrap();
        let locs = vec![Location::new("a", 33.0, 44.0), t.sites[3].clone()];
        let days = vec![2, 7];
        let x = vec![5.0, f64::NAN, 6.0, 7.0];
        let grid = predict_grid(
            &GridTargets {
                locations: locs.clone(),
                days: days.clone(),
                x: x.clone(),
                z: None,
            },
            &fit,
            Some(50),
        )
        .unwrap();
        assert!(grid[1].is_none());
        for (l, loc) in locs.iter().enumerate() {
            for (k, &d) in days.iter().enumerate() {
                let xv = x[l * 2 + k];
                if !xv.is_finite() {
                    continue;
                }
                let p = predict_at(
                    &[PredictTarget {
                        location: loc.clone(),
                        day: d,
                        x: Some(xv),
                        z: [0.0; 6],
                    }],
                    &fit,
                    Some(50),
                )
                .unwrap();
                let g = grid[l * 2 + k].unwrap();
                assert!((g.mu - p[0].mu).abs() < 1e-9 && (g.var - p[0].var).abs() < 1e-9);
            }
        }
    }
}
