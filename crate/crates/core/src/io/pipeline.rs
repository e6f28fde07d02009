//! The three-stage protocol: held-out component predictives, weight
//! estimation on them, then full-data refits and surfaces.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{file_sha256, PipelineConfig};
use super::tables::*;
use super::{load_inputs, Inputs};
use crate::downscaler::{
    cv_predict, fit_downscaler, predict_at, predict_grid, DownscalerFit, GridTargets, ObservationTable, PredictTarget,
    PredictiveInput,
};
use crate::ensemble::{
    ensemble_cv_predict, fit_weights, krige_weights, observations_of, predict_mixture, EnsembleData, Observation,
    WeightPosterior,
};
use crate::error::{FusionError, Result};
use crate::geo::{cell_id, GridSpec, Location, SourceTag};
use crate::kernels::GaussianSummary;
use crate::metrics::{evaluate, make_folds, FoldPlan, Predicted, R2_DEFINITION};

pub const MANIFEST: &str = "manifest.json";

/// Artifact file names inside a run directory.
pub mod artifacts {
    pub const PREDICTIVE_CV: &str = "predictive_cv.csv";
    pub const WEIGHTS: &str = "weights.csv";
    pub const WEIGHT_SAMPLES: &str = "weights_samples.json";
    pub const PREDICTIVE_FULL: &str = "predictive_full.csv";
    pub const WEIGHT_SURFACE: &str = "weight_surface.csv";
    pub const SURFACE: &str = "surface.csv";
    pub const EVAL: &str = "eval.csv";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Failed,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub file: String,
    pub sha256: String,
    pub seed: u64,
    pub config_hash: String,
}

/// Written next to the artifacts and rewritten after every stage; a run
/// that did not finish is marked `failed` (or left `running` if killed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub status: RunStatus,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub stages: Vec<StageTiming>,
    pub artifacts: Vec<ArtifactRecord>,
    pub r2_definition: String,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub eval: Vec<EvalRow>,
    pub manifest: Manifest,
}

/// Directory for a configuration: `<output_dir>/run-<first 12 hex of hash>`.
pub fn run_dir_for(cfg: &PipelineConfig, hash: &str) -> PathBuf {
    cfg.output_dir.join(format!("run-{}", &hash[..12]))
}

struct Run {
    dir: PathBuf,
    manifest: Manifest,
}

impl Run {
    fn save(&self) -> Result<()> {
        write_json(&self.dir.join(MANIFEST), &self.manifest)
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        info!("stage {name}");
        let t0 = Instant::now();
        match f(&self.dir) {
            Ok(v) => {
                self.manifest.stages.push(StageTiming {
                    stage: name.to_string(),
                    seconds: t0.elapsed().as_secs_f64(),
                });
                self.save()?;
                Ok(v)
            }
            Err(e) => {
                self.manifest.status = RunStatus::Failed;
                self.manifest.failed_stage = Some(name.to_string());
                self.manifest.error = Some(e.to_string());
                // the original error matters more than a failed manifest write
                let _ = self.save();
                Err(e.in_stage(name))
            }
        }
    }

    fn artifact(&mut self, name: &str, file: &str) -> Result<()> {
        let sha256 = file_sha256(&self.dir.join(file))?;
        self.manifest.artifacts.push(ArtifactRecord {
            name: name.to_string(),
            file: file.to_string(),
            sha256,
            seed: self.manifest.seed,
            config_hash: self.manifest.config_hash.clone(),
        });
        self.save()
    }
}

/// Runs every stage and writes the artifacts into a fresh run directory.
/// Refuses to touch an existing run directory unless `force` is set.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    cfg.thread_count().map_err(|e| e.in_stage("config"))?;
    cfg.install(|| run_stages(cfg))
}

fn run_stages(cfg: &PipelineConfig) -> Result<RunSummary> {
    let hash = cfg.hash().map_err(|e| e.in_stage("config"))?;
    let dir = run_dir_for(cfg, &hash);
    prepare_dir(&dir, cfg.force).map_err(|e| e.in_stage("config"))?;
    let mut run = Run {
        dir,
        manifest: Manifest {
            seed: cfg.seed,
            config_hash: hash.clone(),
            status: RunStatus::Running,
            failed_stage: None,
            error: None,
            stages: Vec::new(),
            artifacts: Vec::new(),
            r2_definition: R2_DEFINITION.to_string(),
            config: cfg.clone(),
        },
    };
    run.save().map_err(|e| e.in_stage("config"))?;
    let max = cfg.max_samples();

    let inputs = run.stage("load", |_| load_inputs(cfg))?;
    let obs = observations_of(&inputs.table);

    let (folds, cv) = run.stage("cv", |dir| {
        let folds = plan_folds(cfg, &inputs.table)?;
        let cv = cv_inputs(cfg, &inputs.table, &folds)?;
        write_predictive(&dir.join(artifacts::PREDICTIVE_CV), &cv)?;
        Ok((folds, cv))
    })?;
    run.artifact("cv_predictive", artifacts::PREDICTIVE_CV)?;

    let post = run.stage("ensemble", |dir| {
        let data = EnsembleData::build(&obs, &cv, &inputs.sites)?;
        let post = fit_weights(&data, cfg.variant, &cfg.ensemble_chain(1))?;
        let ids: Vec<String> = post.sites.iter().map(|s| s.id.clone()).collect();
        write_weights(&dir.join(artifacts::WEIGHTS), &ids, &post.site_weights)?;
        write_json(&dir.join(artifacts::WEIGHT_SAMPLES), &post)?;
        Ok(post)
    })?;
    run.artifact("weights", artifacts::WEIGHTS)?;
    run.artifact("weight_samples", artifacts::WEIGHT_SAMPLES)?;

    let (ctm_fit, sat_fit) = run.stage("refit", |dir| {
        let (a, b) = full_fits(cfg, &inputs.table);
        let (a, b) = (a?, b?);
        let mut full = monitor_predictive(&inputs, &a, max)?;
        full.extend(monitor_predictive(&inputs, &b, max)?);
        write_predictive(&dir.join(artifacts::PREDICTIVE_FULL), &full.sorted())?;
        Ok((a, b))
    })?;
    run.artifact("full_predictive", artifacts::PREDICTIVE_FULL)?;

    let target = cfg.target();
    let cells = target.cell_locations();
    let w_surface = run.stage("krige", |dir| {
        let w = krige_weights(&post, &cells, cfg.derived_seed(2), max)?;
        let ids: Vec<String> = cells.iter().map(|c| c.id.clone()).collect();
        write_weights(&dir.join(artifacts::WEIGHT_SURFACE), &ids, &w)?;
        Ok(w)
    })?;
    run.artifact("weight_surface", artifacts::WEIGHT_SURFACE)?;

    run.stage("surface", |dir| {
        let days: Vec<i64> = match &cfg.surface_days {
            Some(d) => d.clone(),
            None => (0..inputs.table.n_days as i64)
                .map(|k| inputs.table.first_day + k)
                .collect(),
        };
        let w: Vec<f64> = w_surface.iter().map(|s| s.w_mean).collect();
        let rows = predict_surface(&inputs, &target, &days, &ctm_fit, &sat_fit, &w, max)?;
        write_surface(&dir.join(artifacts::SURFACE), &rows)
    })?;
    run.artifact("surface", artifacts::SURFACE)?;

    let eval = run.stage("evaluate", |dir| {
        let rows = evaluate_cv(&obs, &cv, &inputs.sites, &folds, cfg)?;
        write_eval(&dir.join(artifacts::EVAL), &rows, cfg.seed, &hash)?;
        Ok(rows)
    })?;
    run.artifact("eval", artifacts::EVAL)?;

    run.manifest.status = RunStatus::Complete;
    run.save()?;
    Ok(RunSummary {
        run_dir: run.dir,
        config_hash: hash,
        eval,
        manifest: run.manifest,
    })
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(FusionError::InvalidConfig(format!(
                "run directory {} already exists; pass force to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| FusionError::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| FusionError::io(dir, e))
}

/// In-sample predictive at every monitor record.
fn monitor_predictive(inputs: &Inputs, fit: &DownscalerFit, max: Option<usize>) -> Result<PredictiveInput> {
    let t = &inputs.table;
    let targets: Vec<PredictTarget> = t
        .records
        .iter()
        .map(|r| PredictTarget {
            location: t.sites[r.site].clone(),
            day: r.day,
            x: r.x(fit.source),
            z: r.z,
        })
        .collect();
    Ok(PredictiveInput::new(predict_at(&targets, fit, max)?))
}

/// Source values at the target cells, `[cell][day]`, `NaN` where missing
/// or where a cell centre falls outside the source grid.
fn target_values(series: &GridSeries, cells: &[Location], days: &[i64]) -> Vec<f64> {
    let mut x = Vec::with_capacity(cells.len() * days.len());
    for c in cells {
        let src = series
            .spec
            .locate(c.x, c.y)
            .ok()
            .map(|(r, col)| series.spec.flat(r, col));
        for &d in days {
            x.push(src.and_then(|s| series.get(d, s)).unwrap_or(f64::NAN));
        }
    }
    x
}

/// Fold plan for the held-out inputs, seeded from the pipeline seed.
pub fn plan_folds(cfg: &PipelineConfig, table: &ObservationTable) -> Result<FoldPlan> {
    make_folds(
        (0..table.len()).map(|i| table.record_key(i)),
        cfg.derivation.fold_kind(cfg.n_folds),
        cfg.derived_seed(1),
    )
}

/// Held-out predictives of both sources at every record, in canonical order.
pub fn cv_inputs(cfg: &PipelineConfig, table: &ObservationTable, folds: &FoldPlan) -> Result<PredictiveInput> {
    let max = cfg.max_samples();
    let (ctm, sat) = rayon::join(
        || cv_predict(table, folds, SourceTag::Ctm, &cfg.downscaler_chain(1), max),
        || cv_predict(table, folds, SourceTag::Sat, &cfg.downscaler_chain(2), max),
    );
    let mut cv = ctm?;
    cv.extend(sat?);
    Ok(cv.sorted())
}

/// Both downscalers fitted to every record.
pub fn full_fits(cfg: &PipelineConfig, table: &ObservationTable) -> (Result<DownscalerFit>, Result<DownscalerFit>) {
    rayon::join(
        || fit_downscaler(table, SourceTag::Ctm, &cfg.downscaler_chain(3)),
        || fit_downscaler(table, SourceTag::Sat, &cfg.downscaler_chain(4)),
    )
}

/// Mixture surface on `target` for the given days; `w` is the weight at
/// each target cell (row-major). Cell-days where neither source has a
/// value are skipped.
pub fn predict_surface(
    inputs: &Inputs,
    target: &GridSpec,
    days: &[i64],
    ctm_fit: &DownscalerFit,
    sat_fit: &DownscalerFit,
    w: &[f64],
    max: Option<usize>,
) -> Result<Vec<SurfaceRow>> {
    let cells = target.cell_locations();
    let cells = cells.as_slice();
    if w.len() != cells.len() {
        return Err(FusionError::InvalidConfig(format!(
            "{} weights for {} target cells",
            w.len(),
            cells.len()
        )));
    }
    let z = inputs
        .covariates
        .as_ref()
        .and_then(|t| cells.iter().map(|c| t.site_level(&c.id)).collect::<Option<Vec<_>>>());
    let grid = |series: &GridSeries| GridTargets {
        locations: cells.to_vec(),
        days: days.to_vec(),
        x: target_values(series, cells, days),
        z: z.clone(),
    };
    let (a, b) = rayon::join(
        || predict_grid(&grid(&inputs.ctm), ctm_fit, max),
        || predict_grid(&grid(&inputs.sat), sat_fit, max),
    );
    let (a, b) = (a?, b?);
    let nd = days.len();
    let mut rows = Vec::with_capacity(cells.len() * nd);
    for (k, &day) in days.iter().enumerate() {
        for l in 0..cells.len() {
            let c1 = a[l * nd + k].map(|p| (p.mu, p.var));
            let c2 = b[l * nd + k].map(|p| (p.mu, p.var));
            let Ok(m) = predict_mixture(c1, c2, w[l]) else { continue };
            rows.push(SurfaceRow {
                day,
                row: l / target.n_cols,
                col: l % target.n_cols,
                mean: m.mean(),
                sd: m.sd(),
                q025: m.quantile(0.025),
                q975: m.quantile(0.975),
                w: m.w,
            });
        }
    }
    Ok(rows)
}

/// Held-out metrics for each source alone and for the ensemble. The
/// ensemble is nested: weights for each fold are fitted without it.
pub fn evaluate_cv(
    obs: &[Observation],
    cv: &PredictiveInput,
    sites: &[Location],
    folds: &FoldPlan,
    cfg: &PipelineConfig,
) -> Result<Vec<EvalRow>> {
    let idx = cv.index();
    let label = cfg.derivation.as_str().to_string();
    let mut rows = Vec::new();
    for s in [SourceTag::Ctm, SourceTag::Sat] {
        let held: Vec<(f64, Predicted)> = obs
            .iter()
            .filter_map(|o| {
                idx.get(&(o.site_id.as_str(), o.day, s))
                    .filter(|e| e.available)
                    .map(|e| (o.y, Predicted::Gaussian(GaussianSummary::new(e.mu, e.var))))
            })
            .collect();
        rows.push(EvalRow {
            method: s.as_str().to_string(),
            estimation: "downscaler".into(),
            input: label.clone(),
            report: evaluate(&held)?,
        });
    }
    let mix = ensemble_cv_predict(
        obs,
        cv,
        sites,
        folds,
        cfg.variant,
        &cfg.ensemble_chain(2),
        cfg.max_samples(),
    )?;
    let held: Vec<(f64, Predicted)> = obs.iter().zip(mix).map(|(o, m)| (o.y, m.into())).collect();
    rows.push(EvalRow {
        method: "ensemble".into(),
        estimation: cfg.variant.as_str().into(),
        input: label,
        report: evaluate(&held)?,
    });
    Ok(rows)
}

/// Loads the weight posterior saved by a run.
pub fn load_weight_posterior(path: &Path) -> Result<WeightPosterior> {
    read_json(path)
}

/// Cell id strings of a grid in row-major order.
pub fn cell_ids(g: &GridSpec) -> Vec<String> {
    (0..g.n_rows)
        .flat_map(|r| (0..g.n_cols).map(move |c| cell_id(r, c)))
        .collect()
}
