use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use fusion_core::ensemble::{fit_weights, krige_weights, observations_of, EnsembleData, EnsembleMethod};
use fusion_core::io::{
    self, cv_inputs, evaluate_cv, export_scene, load_inputs, load_monitors, load_predictive, load_weight_posterior,
    load_weights, plan_folds, predict_surface, read_json, write_eval, write_json, write_predictive, write_surface,
    write_weights, Derivation, PipelineConfig,
};
use fusion_core::synth::{generate_scene, SceneConfig};
use fusion_core::{fit_downscaler, DownscalerFit, FusionError, SourceTag};

/// Calibrates two gridded PM2.5 proxies against monitors and blends them
/// with spatially varying weights.
#[derive(Parser)]
#[command(name = "fusion", version)]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene and write it as pipeline inputs.
    Synth(SynthArgs),
    /// Fit one downscaler to all monitor readings.
    FitDownscaler(FitDownscalerArgs),
    /// Held-out component predictives for every reading.
    Cv(CvArgs),
    /// Estimate the weight field from held-out predictives.
    FitEnsemble(FitEnsembleArgs),
    /// Interpolate a fitted weight field to grid cells or monitor locations.
    KrigeWeights(KrigeArgs),
    /// Mixture surface from two downscaler fits and a weight surface.
    Predict(PredictArgs),
    /// Held-out metrics for each source and for the ensemble.
    Evaluate(EvaluateArgs),
    /// Run every stage and write a versioned run directory.
    RunAll(RunAllArgs),
}

/// Overrides for a pipeline configuration file.
#[derive(Args, Clone)]
struct PipelineFlags {
    /// Pipeline configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Ensemble estimator: joint or two_stage.
    #[arg(long)]
    variant: Option<EnsembleMethod>,
    /// Held-out input derivation: kfold or spatial.
    #[arg(long)]
    derivation: Option<Derivation>,
    #[arg(long)]
    folds: Option<usize>,
    /// MCMC iterations for every chain.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// Posterior draws used per prediction (0 = all).
    #[arg(long)]
    max_samples: Option<usize>,
    /// Worker threads (FUSION_THREADS takes precedence).
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl PipelineFlags {
    fn load(&self) -> Result<PipelineConfig> {
        let mut c = PipelineConfig::load(&self.config)?;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.variant {
            c.variant = v;
        }
        if let Some(v) = self.derivation {
            c.derivation = v;
        }
        if let Some(v) = self.folds {
            c.n_folds = v;
        }
        for m in [&mut c.downscaler_mcmc, &mut c.ensemble_mcmc] {
            if let Some(v) = self.iters {
                m.n_iter = v;
            }
            if let Some(v) = self.burn_in {
                m.burn_in = v;
            }
            if let Some(v) = self.thin {
                m.thin = v;
            }
        }
        if let Some(v) = self.max_samples {
            c.max_predict_samples = v;
        }
        if self.threads.is_some() {
            c.threads = self.threads;
        }
        if let Some(v) = &self.output_dir {
            c.output_dir = v.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory for the CSVs and pipeline.toml.
    #[arg(short, long)]
    out: PathBuf,
    /// Scene settings (TOML); flags below override it.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sites: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    missing_rate: Option<f64>,
}

#[derive(Args)]
struct FitDownscalerArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// ctm or sat.
    #[arg(long)]
    source: SourceTag,
    /// Fitted model (JSON).
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// predictive.csv with both sources.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitEnsembleArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Held-out predictives (predictive.csv format).
    #[arg(long)]
    predictive: PathBuf,
    /// Writes weights.csv and weights_samples.json here.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct KrigeArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Weight posterior written by fit-ensemble.
    #[arg(long)]
    samples: PathBuf,
    /// Krige to these locations (monitors.csv format) instead of the target grid.
    #[arg(long)]
    locations: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long)]
    ctm_fit: PathBuf,
    #[arg(long)]
    sat_fit: PathBuf,
    /// Weight surface on the target grid (weights.csv format, cell ids).
    #[arg(long)]
    weights: PathBuf,
    /// Days to predict; defaults to the configured surface days or all days.
    #[arg(long, value_delimiter = ',')]
    days: Option<Vec<i64>>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Held-out predictives produced by `cv` with the same configuration.
    #[arg(long)]
    predictive: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunAllArgs {
    #[command(flatten)]
    pipeline: PipelineFlags,
    /// Replace an existing run directory with the same configuration hash.
    #[arg(long)]
    force: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // a FusionError already prints its own cause chain
            match e.downcast_ref::<FusionError>() {
                Some(f) => eprintln!("error: {f}"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::FAILURE
        }
    }
}

/// Tags an error with the subcommand that failed, unless the pipeline
/// already attached a finer stage.
fn staged<T>(stage: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e.downcast::<FusionError>() {
        Ok(f @ FusionError::Stage { .. }) => f.into(),
        Ok(f) => f.in_stage(stage).into(),
        Err(e) => e.context(format!("stage `{stage}` failed")),
    })
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => staged("synth", synth(a)),
        Command::FitDownscaler(a) => staged("fit-downscaler", fit_one(a)),
        Command::Cv(a) => staged("cv", cv(a)),
        Command::FitEnsemble(a) => staged("fit-ensemble", fit_ensemble(a)),
        Command::KrigeWeights(a) => staged("krige-weights", krige(a)),
        Command::Predict(a) => staged("predict", predict(a)),
        Command::Evaluate(a) => staged("evaluate", evaluate(a)),
        Command::RunAll(a) => staged("run-all", run_all(a)),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut scene = match &a.scene {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str::<SceneConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneConfig::default(),
    };
    if let Some(v) = a.seed {
        scene.seed = v;
    }
    if let Some(v) = a.sites {
        scene.n_sites = v;
    }
    if let Some(v) = a.days {
        scene.n_days = v;
    }
    if let Some(v) = a.missing_rate {
        scene.sat_missing_rate = v;
    }
    scene.full_grids = true;
    let truth = generate_scene(&scene)?;
    let cfg = export_scene(&truth, &a.out, scene.seed)?;
    std::fs::write(a.out.join("scene.toml"), toml::to_string_pretty(&scene)?)?;
    println!("{}", a.out.join("pipeline.toml").display());
    info!(
        "{} readings at {} monitors; hash {}",
        truth.table.len(),
        truth.sites.len(),
        cfg.hash()?
    );
    Ok(())
}

fn fit_one(a: FitDownscalerArgs) -> Result<()> {
    let cfg = a.pipeline.load()?;
    let inputs = load_inputs(&cfg)?;
    let stream = match a.source {
        SourceTag::Ctm => 3,
        SourceTag::Sat => 4,
    };
    let fit = cfg.install(|| fit_downscaler(&inputs.table, a.source, &cfg.downscaler_chain(stream)))?;
    write_json(&a.out, &fit)?;
    Ok(())
}

fn cv(a: CvArgs) -> Result<()> {
    let cfg = a.pipeline.load()?;
    let inputs = load_inputs(&cfg)?;
    let folds = plan_folds(&cfg, &inputs.table)?;
    let cv = cfg.install(|| cv_inputs(&cfg, &inputs.table, &folds))?;
    write_predictive(&a.out, &cv)?;
    Ok(())
}

fn fit_ensemble(a: FitEnsembleArgs) -> Result<()> {
    let cfg = a.pipeline.load()?;
    let inputs = load_inputs(&cfg)?;
    let pred = load_predictive(&a.predictive)?;
    let data = EnsembleData::build(&observations_of(&inputs.table), &pred, &inputs.sites)?;
    let post = cfg.install(|| fit_weights(&data, cfg.variant, &cfg.ensemble_chain(1)))?;
    let ids: Vec<String> = post.sites.iter().map(|s| s.id.clone()).collect();
    write_weights(&a.out.join(io::artifacts::WEIGHTS), &ids, &post.site_weights)?;
    write_json(&a.out.join(io::artifacts::WEIGHT_SAMPLES), &post)?;
    Ok(())
}

fn krige(a: KrigeArgs) -> Result<()> {
    let cfg = a.pipeline.load()?;
    let post = load_weight_posterior(&a.samples)?;
    let targets = match &a.locations {
        Some(p) => load_monitors(p)?,
        None => cfg.target().cell_locations(),
    };
    let w = cfg.install(|| krige_weights(&post, &targets, cfg.derived_seed(2), cfg.max_samples()))?;
    let ids: Vec<String> = targets.iter().map(|t| t.id.clone()).collect();
    write_weights(&a.out, &ids, &w)?;
    Ok(())
}

fn predict(a: PredictArgs) -> Result<()> {
    let cfg = a.pipeline.load()?;
    let inputs = load_inputs(&cfg)?;
    let ctm: DownscalerFit = read_json(&a.ctm_fit)?;
    let sat: DownscalerFit = read_json(&a.sat_fit)?;
    if ctm.source != SourceTag::Ctm || sat.source != SourceTag::Sat {
        bail!("--ctm-fit and --sat-fit must be fits of the ctm and sat sources");
    }
    let target = cfg.target();
    let w = weights_on_grid(&a.weights, &io::cell_ids(&target))?;
    let days = a.days.or_else(|| cfg.surface_days.clone()).unwrap_or_else(|| {
        (0..inputs.table.n_days as i64)
            .map(|k| inputs.table.first_day + k)
            .collect()
    });
    let rows = cfg.install(|| predict_surface(&inputs, &target, &days, &ctm, &sat, &w, cfg.max_samples()))?;
    write_surface(&a.out, &rows)?;
    Ok(())
}

/// Weight means in grid order; every cell must be present.
fn weights_on_grid(path: &Path, ids: &[String]) -> Result<Vec<f64>> {
    let table: std::collections::HashMap<String, f64> =
        load_weights(path)?.into_iter().map(|(id, w)| (id, w.w_mean)).collect();
    ids.iter()
        .map(|id| {
            table
                .get(id)
                .copied()
                .with_context(|| format!("{}: no weight for cell `{id}`", path.display()))
        })
        .collect()
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = a.pipeline.load()?;
    let inputs = load_inputs(&cfg)?;
    let pred = load_predictive(&a.predictive)?;
    let folds = plan_folds(&cfg, &inputs.table)?;
    let obs = observations_of(&inputs.table);
    let rows = cfg.install(|| evaluate_cv(&obs, &pred, &inputs.sites, &folds, &cfg))?;
    write_eval(&a.out, &rows, cfg.seed, &cfg.hash()?)?;
    for r in &rows {
        println!(
            "{:<9} {:<10} {:<8} rmse {:.3}  cov95 {:.1}%  sd {:.3}  r2 {:.3}",
            r.method, r.estimation, r.input, r.report.rmse, r.report.coverage95, r.report.avg_posterior_sd, r.report.r2
        );
    }
    Ok(())
}

fn run_all(a: RunAllArgs) -> Result<()> {
    let mut cfg = a.pipeline.load()?;
    cfg.force |= a.force;
    let summary = fusion_core::run_pipeline(&cfg)?;
    println!("{}", summary.run_dir.display());
    for r in &summary.eval {
        println!(
            "{:<9} {:<10} {:<8} rmse {:.3}  cov95 {:.1}%  sd {:.3}  r2 {:.3}",
            r.method, r.estimation, r.input, r.report.rmse, r.report.coverage95, r.report.avg_posterior_sd, r.report.r2
        );
    }
    Ok(())
}
