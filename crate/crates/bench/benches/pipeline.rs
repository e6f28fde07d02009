use criterion::{criterion_group, criterion_main, Criterion};

use fusion_core::ensemble::{fit_joint, fit_two_stage, observations_of, EnsembleData, JointOptions};
use fusion_core::geo::{GridSpec, SourceTag};
use fusion_core::io::{export_scene, run_pipeline};
use fusion_core::synth::{generate_scene, SceneConfig};
use fusion_core::{fit_downscaler, MCMCConfig};

fn scene(full_grids: bool) -> SceneConfig {
    SceneConfig {
        n_sites: 20,
        n_days: 60,
        ctm_grid: GridSpec::new(0.0, 0.0, 24.0, 20, 20, SourceTag::Ctm).unwrap(),
        sat_grid: GridSpec::new(0.0, 0.0, 12.0, 40, 40, SourceTag::Sat).unwrap(),
        full_grids,
        ..SceneConfig::default()
    }
}

fn samplers(c: &mut Criterion) {
    let t = generate_scene(&scene(false)).unwrap();
    let mcmc = MCMCConfig::short(1000, 500, 2);
    let mut g = c.benchmark_group("samplers");
    g.sample_size(10);
    g.bench_function("downscaler_ctm_1000_iters", |b| {
        b.iter(|| fit_downscaler(&t.table, SourceTag::Ctm, &mcmc).unwrap())
    });
    g.bench_function("downscaler_sat_1000_iters", |b| {
        b.iter(|| fit_downscaler(&t.table, SourceTag::Sat, &mcmc).unwrap())
    });
    let data = EnsembleData::build(&observations_of(&t.table), &t.inputs, &t.sites).unwrap();
    g.bench_function("joint_1000_iters", |b| {
        b.iter(|| fit_joint(&data, &mcmc, JointOptions::default()).unwrap())
    });
    g.bench_function("two_stage_1000_iters", |b| {
        b.iter(|| fit_two_stage(&data, &mcmc).unwrap())
    });
    g.finish();
}

fn end_to_end(c: &mut Criterion) {
    let t = generate_scene(&scene(true)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = export_scene(&t, dir.path(), 1).unwrap();
    cfg.downscaler_mcmc = MCMCConfig::short(400, 200, 2);
    cfg.ensemble_mcmc = MCMCConfig::short(400, 200, 2);
    cfg.n_folds = 5;
    cfg.surface_days = Some(vec![0, 30]);
    cfg.force = true;
    let mut g = c.benchmark_group("pipeline");
    g.sample_size(10);
    g.bench_function("run_pipeline_20x60", |b| b.iter(|| run_pipeline(&cfg).unwrap()));
    g.finish();
}

criterion_group!(benches, samplers, end_to_end);
criterion_main!(benches);
