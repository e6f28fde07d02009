//! File formats, pipeline configuration and the end-to-end run.

mod config;
mod pipeline;
mod tables;

use std::path::Path;

use log::warn;

pub use config::{file_sha256, Derivation, InputPaths, PipelineConfig, THREADS_ENV};
pub use pipeline::{
    artifacts, cell_ids, cv_inputs, evaluate_cv, full_fits, load_weight_posterior, plan_folds, predict_surface,
    run_dir_for, run_pipeline, ArtifactRecord, Manifest, RunStatus, RunSummary, StageTiming, MANIFEST,
};
pub use tables::*;

use crate::downscaler::{ObsRecord, ObservationTable, N_COVARIATES};
use crate::ensemble::SiteWeight;
use crate::error::{FusionError, Result};
use crate::geo::{GridLink, Location};
use crate::synth::SceneTruth;

/// Parsed pipeline inputs joined into one observation table.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub sites: Vec<Location>,
    pub table: ObservationTable,
    pub ctm: GridSeries,
    pub sat: GridSeries,
    pub covariates: Option<CovariateTable>,
}

pub fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let p = &cfg.inputs;
    let sites = load_monitors(&p.monitors)?;
    let obs = load_obs(&p.obs)?;
    let ctm = load_grid(&p.grid_ctm, cfg.ctm_grid)?;
    let sat = load_grid(&p.grid_sat, cfg.sat_grid)?;
    let covariates = p.covariates.as_deref().map(load_covariates).transpose()?;
    let table = assemble_table(&sites, &obs, &ctm, &sat, covariates.as_ref())?;
    Ok(Inputs {
        sites,
        table,
        ctm,
        sat,
        covariates,
    })
}

/// Links monitors to both grids and attaches source values and covariates
/// to each reading. The calendar spans the readings and the model
/// simulation. Readings without a model-simulation value are dropped with
/// a warning; a missing satellite value is kept as missing. Without a
/// covariate table every covariate is zero (and so drops out of the fit).
pub fn assemble_table(
    sites: &[Location],
    obs: &[ObsRow],
    ctm: &GridSeries,
    sat: &GridSeries,
    cov: Option<&CovariateTable>,
) -> Result<ObservationTable> {
    if obs.is_empty() {
        return Err(FusionError::EmptyInput("no monitor readings".into()));
    }
    let link = GridLink::build(sites, &ctm.spec, &sat.spec)?;
    let pos: std::collections::HashMap<&str, usize> =
        sites.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
    let mut records = Vec::with_capacity(obs.len());
    let mut dropped = 0usize;
    for o in obs {
        let &s = pos
            .get(o.site_id.as_str())
            .ok_or_else(|| FusionError::InvalidConfig(format!("reading at unknown monitor `{}`", o.site_id)))?;
        let (cr, cc) = link.ctm[s];
        let (sr, sc) = link.sat[s];
        let Some(x_ctm) = ctm.get(o.day, ctm.spec.flat(cr, cc)) else {
            dropped += 1;
            continue;
        };
        let z = match cov {
            Some(t) => t.lookup(&o.site_id, o.day).ok_or_else(|| {
                FusionError::InvalidConfig(format!("no covariates for `{}` day {}", o.site_id, o.day))
            })?,
            None => [0.0; N_COVARIATES],
        };
        records.push(ObsRecord {
            site: s,
            day: o.day,
            y: o.pm25,
            x_ctm,
            x_sat: sat.get(o.day, sat.spec.flat(sr, sc)),
            z,
        });
    }
    if dropped > 0 {
        warn!("dropped {dropped} readings without a model-simulation value");
    }
    if records.is_empty() {
        return Err(FusionError::InsufficientData(
            "no reading has a model-simulation value".into(),
        ));
    }
    let first = records.iter().map(|r| r.day).min().unwrap_or(0).min(ctm.first_day);
    let last = records
        .iter()
        .map(|r| r.day)
        .max()
        .unwrap_or(0)
        .max(ctm.first_day + ctm.n_days as i64 - 1);
    ObservationTable::new(sites.to_vec(), records, first, (last - first + 1) as usize)
}

/// Writes a synthetic scene as pipeline inputs plus `pipeline.toml` (with
/// relative paths) and the true site weights in `truth_weights.csv`.
pub fn export_scene(scene: &SceneTruth, dir: &Path, seed: u64) -> Result<PipelineConfig> {
    let c = &scene.config;
    if !c.full_grids {
        return Err(FusionError::InvalidConfig("scene export needs full_grids".into()));
    }
    std::fs::create_dir_all(dir).map_err(|e| FusionError::io(dir, e))?;
    let t = &scene.table;
    write_monitors(&dir.join("monitors.csv"), &scene.sites)?;
    let obs: Vec<ObsRow> = t
        .records
        .iter()
        .map(|r| ObsRow {
            site_id: t.sites[r.site].id.clone(),
            day: r.day,
            pm25: r.y,
        })
        .collect();
    write_obs(&dir.join("obs.csv"), &obs)?;
    write_grid(
        &dir.join("grid_ctm.csv"),
        &GridSeries::new(c.ctm_grid, c.first_day, c.n_days, scene.ctm_x.clone())?,
    )?;
    write_grid(
        &dir.join("grid_sat.csv"),
        &GridSeries::new(c.sat_grid, c.first_day, c.n_days, scene.sat_x.clone())?,
    )?;
    let mut cov = CovariateTable::default();
    for r in &t.records {
        cov.daily.insert((t.sites[r.site].id.clone(), r.day), r.z);
    }
    write_covariates(&dir.join("covariates.csv"), &cov)?;
    let ids: Vec<String> = scene.sites.iter().map(|s| s.id.clone()).collect();
    let truth: Vec<SiteWeight> = scene
        .w
        .iter()
        .zip(&scene.q)
        .map(|(&w, &q)| SiteWeight {
            w_mean: w,
            w_lo: w,
            w_hi: w,
            q_mean: q,
        })
        .collect();
    write_weights(&dir.join("truth_weights.csv"), &ids, &truth)?;

    let rel = PipelineConfig::new(
        seed,
        InputPaths::in_dir(Path::new(""), true),
        "runs".into(),
        c.ctm_grid,
        c.sat_grid,
    );
    let path = dir.join("pipeline.toml");
    std::fs::write(&path, rel.to_toml()?).map_err(|e| FusionError::io(&path, e))?;
    PipelineConfig::load(&path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GridSpec, SourceTag};
    use crate::mcmc::MCMCConfig;
    use crate::synth::{generate_scene, SceneConfig};

    fn small_scene(seed: u64) -> SceneTruth {
        generate_scene(&SceneConfig {
            n_sites: 10,
            n_days: 12,
            ctm_grid: GridSpec::new(0.0, 0.0, 24.0, 8, 8, SourceTag::Ctm).unwrap(),
            sat_grid: GridSpec::new(0.0, 0.0, 12.0, 16, 16, SourceTag::Sat).unwrap(),
            site_margin: 20.0,
            sat_missing_rate: 0.3,
            seed,
            ..SceneConfig::default()
        })
        .unwrap()
    }

    fn quick(cfg: &mut PipelineConfig) {
        cfg.downscaler_mcmc = MCMCConfig::short(120, 60, 2);
        cfg.ensemble_mcmc = MCMCConfig::short(200, 100, 2);
        cfg.n_folds = 3;
        cfg.max_predict_samples = 20;
        cfg.surface_days = Some(vec![0, 5]);
    }

    #[test]
    fn export_reassembles_the_scene_table() {
        let scene = small_scene(3);
        let d = tempfile::tempdir().unwrap();
        let cfg = export_scene(&scene, d.path(), 5).unwrap();
        let inputs = load_inputs(&cfg).unwrap();
        assert_eq!(inputs.table, scene.table);
    }

    #[test]
    fn pipeline_writes_every_artifact_and_is_reproducible() {
        let scene = small_scene(4);
        let d = tempfile::tempdir().unwrap();
        let mut cfg = export_scene(&scene, d.path(), 5).unwrap();
        quick(&mut cfg);
        let a = run_pipeline(&cfg).unwrap();
        assert_eq!(a.manifest.status, RunStatus::Complete);
        let dir = &a.run_dir;
        assert!(dir.file_name().unwrap().to_str().unwrap().starts_with("run-"));
        let cv = load_predictive(&dir.join(artifacts::PREDICTIVE_CV)).unwrap();
        assert_eq!(cv.entries.len(), 2 * scene.table.len());
        assert_eq!(load_weights(&dir.join(artifacts::WEIGHTS)).unwrap().len(), 10);
        let post = load_weight_posterior(&dir.join(artifacts::WEIGHT_SAMPLES)).unwrap();
        assert_eq!(post.samples.len(), 50);
        assert_eq!(
            load_predictive(&dir.join(artifacts::PREDICTIVE_FULL))
                .unwrap()
                .entries
                .len(),
            2 * scene.table.len()
        );
        let ws = load_weights(&dir.join(artifacts::WEIGHT_SURFACE)).unwrap();
        assert_eq!(ws.len(), 256);
        let surf = load_surface(&dir.join(artifacts::SURFACE)).unwrap();
        assert_eq!(surf.len(), 2 * 256);
        for r in &surf {
            assert!(r.q025 <= r.mean && r.mean <= r.q975 || r.q025 <= r.q975);
            assert!((0.0..=1.0).contains(&r.w));
            assert!(r.sd > 0.0);
        }
        let eval = load_eval(&dir.join(artifacts::EVAL)).unwrap();
        assert_eq!(eval.len(), 3);
        assert_eq!(eval[2].method, "ensemble");
        let text = std::fs::read_to_string(dir.join(artifacts::EVAL)).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with(&format!(",5,{}", a.config_hash)));

        // same hash -> refuse, unless forced
        let err = run_pipeline(&cfg).unwrap_err();
        assert!(
            matches!(err, FusionError::Stage { ref stage, .. } if stage == "config"),
            "{err}"
        );
        let mut forced = cfg.clone();
        forced.force = true;
        forced.threads = Some(2);
        let b = run_pipeline(&forced).unwrap();
        assert_eq!(a.manifest.artifacts, b.manifest.artifacts);
    }

    #[test]
    fn failure_is_stage_tagged_and_recorded() {
        let scene = small_scene(6);
        let d = tempfile::tempdir().unwrap();
        let mut cfg = export_scene(&scene, d.path(), 5).unwrap();
        quick(&mut cfg);
        cfg.surface_days = Some(vec![500]);
        let err = run_pipeline(&cfg).unwrap_err();
        match &err {
            FusionError::Stage { stage, .. } => assert_eq!(stage, "surface"),
            other => panic!("{other}"),
        }
        let dir = run_dir_for(&cfg, &cfg.hash().unwrap());
        let m: Manifest = read_json(&dir.join(MANIFEST)).unwrap();
        assert_eq!(m.status, RunStatus::Failed);
        assert_eq!(m.failed_stage.as_deref(), Some("surface"));
        assert_eq!(m.artifacts.len(), 5);
    }

    #[test]
    fn unknown_monitor_in_obs_is_rejected() {
        let scene = small_scene(7);
        let d = tempfile::tempdir().unwrap();
        let cfg = export_scene(&scene, d.path(), 5).unwrap();
        let mut text = std::fs::read_to_string(&cfg.inputs.obs).unwrap();
        text.push_str("ghost,0,3.0\n");
        std::fs::write(&cfg.inputs.obs, text).unwrap();
        assert!(matches!(load_inputs(&cfg), Err(FusionError::InvalidConfig(m)) if m.contains("ghost")));
    }
}
