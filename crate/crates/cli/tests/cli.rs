use std::path::Path;
use std::process::{Command, Output};

fn fusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusion"))
        .args(args)
        .env_remove("FUSION_THREADS")
        .output()
        .expect("spawn fusion")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

const QUICK: &[&str] = &[
    "--iters",
    "150",
    "--burn-in",
    "50",
    "--thin",
    "2",
    "--folds",
    "3",
    "--max-samples",
    "10",
];

fn synth(dir: &Path) -> String {
    let out = fusion(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--seed",
        "3",
        "--sites",
        "10",
        "--days",
        "12",
        "--missing-rate",
        "0.3",
    ]);
    ok(&out);
    let cfg = dir.join("pipeline.toml");
    assert!(cfg.exists());
    cfg.to_str().unwrap().to_string()
}

fn find_run(dir: &Path) -> std::path::PathBuf {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.file_name().unwrap().to_str().unwrap().starts_with("run-"))
        .expect("run directory")
}

#[test]
fn synth_then_run_all() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synth(d.path());
    let runs = d.path().join("out");
    let mut args = vec![
        "run-all",
        "--config",
        &cfg,
        "--output-dir",
        runs.to_str().unwrap(),
        "--threads",
        "1",
    ];
    args.extend_from_slice(QUICK);
    ok(&fusion(&args));

    let run = find_run(&runs);
    for f in [
        "manifest.json",
        "predictive_cv.csv",
        "weights.csv",
        "weights_samples.json",
        "predictive_full.csv",
        "weight_surface.csv",
        "surface.csv",
        "eval.csv",
    ] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let eval = std::fs::read_to_string(run.join("eval.csv")).unwrap();
    assert!(eval.starts_with("method,estimation,input,rmse,coverage95,avg_posterior_sd,r2,n"));
    assert_eq!(eval.lines().count(), 4);

    // identical configuration: refused without --force
    let again = fusion(&args);
    assert!(!again.status.success());
    args.push("--force");
    ok(&fusion(&args));
}

#[test]
fn stages_run_one_at_a_time() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synth(d.path());
    let p = |f: &str| d.path().join(f).to_str().unwrap().to_string();
    let step = |head: &[&str]| {
        let mut a = head.to_vec();
        a.extend_from_slice(&["--config", &cfg]);
        a.extend_from_slice(QUICK);
        ok(&fusion(&a));
    };
    step(&["cv", "--out", &p("cv.csv")]);
    step(&["fit-ensemble", "--predictive", &p("cv.csv"), "--out", &p("ens")]);
    assert!(d.path().join("ens/weights.csv").exists());
    step(&[
        "krige-weights",
        "--samples",
        &p("ens/weights_samples.json"),
        "--out",
        &p("ws.csv"),
    ]);
    step(&["fit-downscaler", "--source", "ctm", "--out", &p("ctm.json")]);
    step(&["fit-downscaler", "--source", "sat", "--out", &p("sat.json")]);
    step(&[
        "predict",
        "--ctm-fit",
        &p("ctm.json"),
        "--sat-fit",
        &p("sat.json"),
        "--weights",
        &p("ws.csv"),
        "--days",
        "1",
        "--out",
        &p("surface.csv"),
    ]);
    let surface = std::fs::read_to_string(p("surface.csv")).unwrap();
    assert_eq!(surface.lines().count(), 1 + 100 * 100);
    step(&["evaluate", "--predictive", &p("cv.csv"), "--out", &p("eval.csv")]);
    assert_eq!(std::fs::read_to_string(p("eval.csv")).unwrap().lines().count(), 4);
}

#[test]
fn bad_config_exits_nonzero_with_stage() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("pipeline.toml");
    std::fs::write(&cfg, "seed = 1\nbogus = true\n").unwrap();
    let out = fusion(&["run-all", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `run-all` failed"), "{err}");
}

#[test]
fn missing_input_file_is_reported() {
    let d = tempfile::tempdir().unwrap();
    let cfg = synth(d.path());
    std::fs::remove_file(d.path().join("obs.csv")).unwrap();
    let out = fusion(&["run-all", "--config", &cfg]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("stage `run-all` failed") && err.contains("obs.csv"),
        "{err}"
    );
}
