use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::EnsembleMethod;
use crate::error::{FusionError, Result};
use crate::geo::GridSpec;
use crate::mcmc::{stream_id, MCMCConfig};
use crate::metrics::FoldKind;

/// How the held-out component predictives feeding the ensemble are made.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Derivation {
    /// Random k-fold split of site-days.
    #[default]
    Kfold,
    /// Leave one monitor out.
    Spatial,
}

impl Derivation {
    pub fn fold_kind(self, n_folds: usize) -> FoldKind {
        match self {
            Derivation::Kfold => FoldKind::KFold(n_folds),
            Derivation::Spatial => FoldKind::SpatialLomo,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Derivation::Kfold => "kfold",
            Derivation::Spatial => "spatial",
        }
    }
}

impl std::str::FromStr for Derivation {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kfold" | "k_fold" | "k-fold" => Ok(Derivation::Kfold),
            "spatial" | "lomo" => Ok(Derivation::Spatial),
            other => Err(FusionError::InvalidConfig(format!(
                "unknown input derivation `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    pub monitors: PathBuf,
    pub obs: PathBuf,
    pub grid_ctm: PathBuf,
    pub grid_sat: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub covariates: Option<PathBuf>,
}

impl InputPaths {
    /// Files in a directory under their conventional names.
    pub fn in_dir(dir: &Path, with_covariates: bool) -> Self {
        InputPaths {
            monitors: dir.join("monitors.csv"),
            obs: dir.join("obs.csv"),
            grid_ctm: dir.join("grid_ctm.csv"),
            grid_sat: dir.join("grid_sat.csv"),
            covariates: with_covariates.then(|| dir.join("covariates.csv")),
        }
    }

    fn all(&self) -> Vec<(&'static str, &Path)> {
        let mut v: Vec<(&'static str, &Path)> = vec![
            ("monitors", &self.monitors),
            ("obs", &self.obs),
            ("grid_ctm", &self.grid_ctm),
            ("grid_sat", &self.grid_sat),
        ];
        if let Some(c) = &self.covariates {
            v.push(("covariates", c));
        }
        v
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.monitors);
        fix(&mut self.obs);
        fix(&mut self.grid_ctm);
        fix(&mut self.grid_sat);
        if let Some(c) = self.covariates.as_mut() {
            fix(c);
        }
    }
}

fn default_folds() -> usize {
    10
}

fn default_predict_samples() -> usize {
    250
}

/// Everything a pipeline run needs. `seed` is the only source of
/// randomness; the `seed` fields inside the two MCMC sections are ignored
/// and replaced by values derived from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub inputs: InputPaths,
    pub output_dir: PathBuf,
    pub ctm_grid: GridSpec,
    pub sat_grid: GridSpec,
    /// Surface grid; defaults to the satellite grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_grid: Option<GridSpec>,
    /// Days written to the surface; defaults to every day with data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surface_days: Option<Vec<i64>>,
    #[serde(default)]
    pub downscaler_mcmc: MCMCConfig,
    #[serde(default)]
    pub ensemble_mcmc: MCMCConfig,
    #[serde(default = "default_variant")]
    pub variant: EnsembleMethod,
    #[serde(default)]
    pub derivation: Derivation,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    /// Posterior draws used per prediction; 0 uses all retained draws.
    #[serde(default = "default_predict_samples")]
    pub max_predict_samples: usize,
    /// Worker threads; the `FUSION_THREADS` environment variable wins.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Replace an existing run directory with the same hash.
    #[serde(default)]
    pub force: bool,
}

fn default_variant() -> EnsembleMethod {
    EnsembleMethod::Joint
}

pub const THREADS_ENV: &str = "FUSION_THREADS";

impl PipelineConfig {
    pub fn new(seed: u64, inputs: InputPaths, output_dir: PathBuf, ctm_grid: GridSpec, sat_grid: GridSpec) -> Self {
        PipelineConfig {
            seed,
            inputs,
            output_dir,
            ctm_grid,
            sat_grid,
            target_grid: None,
            surface_days: None,
            downscaler_mcmc: MCMCConfig::default(),
            ensemble_mcmc: MCMCConfig::default(),
            variant: EnsembleMethod::Joint,
            derivation: Derivation::Kfold,
            n_folds: default_folds(),
            max_predict_samples: default_predict_samples(),
            threads: None,
            force: false,
        }
    }

    /// Reads a TOML file; relative input paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FusionError::io(path, e))?;
        let mut cfg: PipelineConfig = toml::from_str(&text).map_err(|e| FusionError::Parse {
            path: path.display().to_string(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1) as u64),
            msg: e.message().to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.inputs.resolve(base);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| FusionError::InvalidConfig(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.ctm_grid.validate()?;
        self.sat_grid.validate()?;
        if let Some(g) = &self.target_grid {
            g.validate()?;
        }
        self.downscaler_mcmc.validate()?;
        self.ensemble_mcmc.validate()?;
        if self.derivation == Derivation::Kfold && self.n_folds < 2 {
            return Err(FusionError::InvalidConfig("n_folds must be at least 2".into()));
        }
        if self.threads == Some(0) {
            return Err(FusionError::InvalidConfig("threads must be at least 1".into()));
        }
        for (name, p) in self.inputs.all() {
            if !p.is_file() {
                return Err(FusionError::InvalidConfig(format!(
                    "{name} file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    pub fn target(&self) -> GridSpec {
        self.target_grid.unwrap_or(self.sat_grid)
    }

    pub fn max_samples(&self) -> Option<usize> {
        (self.max_predict_samples > 0).then_some(self.max_predict_samples)
    }

    /// Thread count: environment override, then config, then rayon's default.
    pub fn thread_count(&self) -> Result<Option<usize>> {
        match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(Some(n)),
                _ => Err(FusionError::InvalidConfig(format!(
                    "{THREADS_ENV}=`{v}` is not a positive integer"
                ))),
            },
            _ => Ok(self.threads),
        }
    }

    /// Runs `f` on a pool with the configured thread count. Results do not
    /// depend on the count.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
        match self.thread_count()? {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| FusionError::InvalidConfig(e.to_string()))?
                .install(f),
            None => f(),
        }
    }

    pub fn downscaler_chain(&self, stream: u64) -> MCMCConfig {
        self.downscaler_mcmc.with_seed(stream_id(&[self.seed, 0xd5, stream]))
    }

    pub fn ensemble_chain(&self, stream: u64) -> MCMCConfig {
        self.ensemble_mcmc.with_seed(stream_id(&[self.seed, 0xe1, stream]))
    }

    pub fn derived_seed(&self, stream: u64) -> u64 {
        stream_id(&[self.seed, 0x5e, stream])
    }

    /// SHA-256 over the settings that affect results and the contents of
    /// every input file. Output location, thread count and `force` are
    /// excluded, as are the input paths themselves.
    pub fn hash(&self) -> Result<String> {
        let mut v = serde_json::to_value(self).map_err(|e| FusionError::InvalidConfig(e.to_string()))?;
        let obj = v.as_object_mut().expect("config serializes to an object");
        for key in ["output_dir", "threads", "force", "inputs"] {
            obj.remove(key);
        }
        for key in ["downscaler_mcmc", "ensemble_mcmc"] {
            if let Some(m) = obj.get_mut(key).and_then(|m| m.as_object_mut()) {
                m.remove("seed");
            }
        }
        let mut digests = serde_json::Map::new();
        for (name, p) in self.inputs.all() {
            digests.insert(name.to_string(), file_sha256(p)?.into());
        }
        obj.insert("input_digests".into(), digests.into());
        let text = serde_json::to_string(&v).map_err(|e| FusionError::InvalidConfig(e.to_string()))?;
        Ok(hex(&Sha256::digest(text.as_bytes())))
    }
}

pub fn file_sha256(path: &Path) -> Result<String> {
    use std::io::Read;
    let mut f = std::fs::File::open(path).map_err(|e| FusionError::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| FusionError::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::SourceTag;

    fn cfg(dir: &Path) -> PipelineConfig {
        let inputs = InputPaths::in_dir(dir, false);
        for (_, p) in inputs.all() {
            std::fs::write(p, "x\n").unwrap();
        }
        PipelineConfig::new(
            7,
            inputs,
            dir.join("out"),
            GridSpec::new(0.0, 0.0, 12.0, 5, 5, SourceTag::Ctm).unwrap(),
            GridSpec::new(0.0, 0.0, 6.0, 10, 10, SourceTag::Sat).unwrap(),
        )
    }

    #[test]
    fn toml_round_trip_with_relative_paths() {
        let d = tempfile::tempdir().unwrap();
        let mut c = cfg(d.path());
        c.variant = EnsembleMethod::TwoStage;
        c.derivation = Derivation::Spatial;
        let mut rel = c.clone();
        rel.inputs = InputPaths::in_dir(Path::new("."), false);
        rel.output_dir = "out".into();
        let p = d.path().join("pipeline.toml");
        std::fs::write(&p, rel.to_toml().unwrap()).unwrap();
        let back = PipelineConfig::load(&p).unwrap();
        assert_eq!(back.variant, EnsembleMethod::TwoStage);
        assert_eq!(back.derivation, Derivation::Spatial);
        assert_eq!(back.hash().unwrap(), c.hash().unwrap());
        back.validate().unwrap();
    }

    #[test]
    fn minimal_toml_uses_defaults() {
        let d = tempfile::tempdir().unwrap();
        let _ = cfg(d.path());
        let p = d.path().join("p.toml");
        std::fs::write(
            &p,
            r#"
seed = 3
output_dir = "runs"
[inputs]
monitors = "monitors.csv"
obs = "obs.csv"
grid_ctm = "grid_ctm.csv"
grid_sat = "grid_sat.csv"
[ctm_grid]
origin_x = 0.0
origin_y = 0.0
cell_size = 12.0
n_rows = 5
n_cols = 5
source_tag = "ctm"
[sat_grid]
origin_x = 0.0
origin_y = 0.0
cell_size = 6.0
n_rows = 10
n_cols = 10
source_tag = "sat"
[ensemble_mcmc]
n_iter = 500
burn_in = 100
"#,
        )
        .unwrap();
        let c = PipelineConfig::load(&p).unwrap();
        assert_eq!(c.n_folds, 10);
        assert_eq!(c.ensemble_mcmc.n_iter, 500);
        assert_eq!(c.ensemble_mcmc.thin, 4);
        assert_eq!(c.variant, EnsembleMethod::Joint);
        assert_eq!(c.target(), c.sat_grid);
        c.validate().unwrap();
    }

    #[test]
    fn bad_enum_and_unknown_key_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join("p.toml");
        std::fs::write(&p, "seed = 1\nvariant = \"three_stage\"\n").unwrap();
        assert!(matches!(PipelineConfig::load(&p), Err(FusionError::Parse { .. })));
        std::fs::write(&p, "seed = 1\nsede = 2\n").unwrap();
        assert!(PipelineConfig::load(&p).is_err());
    }

    #[test]
    fn hash_ignores_runtime_settings_but_not_inputs() {
        let d = tempfile::tempdir().unwrap();
        let c = cfg(d.path());
        let mut r = c.clone();
        r.threads = Some(3);
        r.force = true;
        r.output_dir = "/elsewhere".into();
        r.downscaler_mcmc.seed = 99;
        assert_eq!(c.hash().unwrap(), r.hash().unwrap());
        let mut s = c.clone();
        s.seed = 8;
        assert_ne!(c.hash().unwrap(), s.hash().unwrap());
        let h = c.hash().unwrap();
        std::fs::write(&c.inputs.obs, "y\n").unwrap();
        assert_ne!(c.hash().unwrap(), h);
    }

    #[test]
    fn missing_input_fails_validation() {
        let d = tempfile::tempdir().unwrap();
        let c = cfg(d.path());
        std::fs::remove_file(&c.inputs.grid_sat).unwrap();
        assert!(matches!(c.validate(), Err(FusionError::InvalidConfig(m)) if m.contains("grid_sat")));
    }
}
