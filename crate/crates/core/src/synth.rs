//! Forward simulation of the full generative model with known truth, and
//! brute-force oracles used to check the samplers.
//!
//! A scene has a smooth "pollution" field on a fine grid, two proxies of it
//! (a model simulation on a coarse grid and a satellite retrieval with
//! missing cells), monitor sites with covariates, one downscaler mean per
//! source, and a logit-GP weight field deciding which source's regime
//! produced each monitor reading.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::downscaler::{Covariates, ObsRecord, ObservationTable, PredictiveEntry, PredictiveInput, N_COVARIATES};
use crate::ensemble::MixtureDistribution;
use crate::error::{FusionError, Result};
use crate::geo::{distance_matrix, GridSpec, Location, SourceTag};
use crate::kernels::dist::{inv_logit, normal_logpdf, std_normal};
use crate::kernels::{exp_cov_matrix, CholFactor, ExpCovParams, JitterPolicy};
use crate::mcmc::{stream_rng, ChainRng};

/// Downscaler parameters of one source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceTruth {
    pub level_a: f64,
    pub level_b: f64,
    pub a: [f64; 3],
    pub theta1: f64,
    pub theta2: f64,
    pub eta_alpha0: f64,
    pub eta_beta0: f64,
    pub sigma2_alpha0: f64,
    pub sigma2_beta0: f64,
    /// Effects per raw covariate unit; ignored for the model simulation.
    pub gamma: [f64; N_COVARIATES],
    pub sigma2_y: f64,
}

impl SourceTruth {
    pub fn ctm_default() -> Self {
        SourceTruth {
            level_a: 2.0,
            level_b: 0.8,
            a: [1.0, 0.08, 0.05],
            theta1: 150.0,
            theta2: 250.0,
            eta_alpha0: 0.8,
            eta_beta0: 0.7,
            sigma2_alpha0: 0.5,
            sigma2_beta0: 0.002,
            gamma: [0.0; N_COVARIATES],
            sigma2_y: 4.0,
        }
    }

    pub fn sat_default() -> Self {
        SourceTruth {
            level_a: 3.0,
            level_b: 25.0,
            a: [1.0, 2.0, 1.0],
            theta1: 200.0,
            theta2: 300.0,
            eta_alpha0: 0.8,
            eta_beta0: 0.6,
            sigma2_alpha0: 0.5,
            sigma2_beta0: 2.0,
            gamma: [0.5, -0.3, 0.8, 0.6, -0.4, 0.3],
            sigma2_y: 6.0,
        }
    }

    /// `alpha = 0`, `beta = 1`, no covariates, no noise: `y = x`.
    pub fn identity() -> Self {
        SourceTruth {
            level_a: 0.0,
            level_b: 1.0,
            a: [0.0; 3],
            theta1: 100.0,
            theta2: 100.0,
            eta_alpha0: 0.5,
            eta_beta0: 0.5,
            sigma2_alpha0: 0.0,
            sigma2_beta0: 0.0,
            gamma: [0.0; N_COVARIATES],
            sigma2_y: 0.0,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let bad = |m: String| Err(FusionError::InvalidConfig(format!("{name}: {m}")));
        if !(self.theta1 > 0.0 && self.theta2 > 0.0) {
            return bad("latent ranges must be positive".into());
        }
        for e in [self.eta_alpha0, self.eta_beta0] {
            if !(0.0..1.0).contains(&e) {
                return bad(format!("temporal dependence {e} outside [0, 1)"));
            }
        }
        if self.sigma2_alpha0 < 0.0 || self.sigma2_beta0 < 0.0 || self.sigma2_y < 0.0 {
            return bad("variances must be non-negative".into());
        }
        Ok(())
    }
}

/// Per-site residual variance pattern.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseLayout {
    /// Each source uses its own `sigma2_y` everywhere.
    Uniform,
    /// The model simulation has variance `good` west of the domain centre
    /// and `bad` east of it; the satellite the reverse.
    HalfSplit { good: f64, bad: f64 },
}

/// How the monitor readings are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Response {
    /// `y = m_z + noise` with `z ~ Bernoulli(w_s)` choosing the regime.
    Mixture,
    /// Every reading from one source's regime.
    Source(SourceTag),
}

/// The smooth field both proxies observe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseField {
    pub level: f64,
    pub spatial_sd: f64,
    /// Length scale (km) of the smooth spatial pattern.
    pub spatial_scale: f64,
    pub temporal_sd: f64,
    pub temporal_ar: f64,
}

impl Default for BaseField {
    fn default() -> Self {
        BaseField {
            level: 10.0,
            spatial_sd: 3.0,
            spatial_scale: 150.0,
            temporal_sd: 3.0,
            temporal_ar: 0.7,
        }
    }
}

/// How each proxy distorts the base field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub ctm_bias_sd: f64,
    pub ctm_noise_sd: f64,
    pub sat_bias_sd: f64,
    pub sat_noise_sd: f64,
    /// Satellite values are `(field + bias + noise) / sat_scale`.
    pub sat_scale: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            ctm_bias_sd: 2.0,
            ctm_noise_sd: 1.5,
            sat_bias_sd: 2.0,
            sat_noise_sd: 2.0,
            sat_scale: 40.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightTruth {
    pub tau2: f64,
    pub rho: f64,
    /// Added to `q` west of the centre and subtracted east of it.
    pub split_offset: f64,
}

impl Default for WeightTruth {
    fn default() -> Self {
        WeightTruth {
            tau2: 1.0,
            rho: 300.0,
            split_offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub n_sites: usize,
    pub n_days: usize,
    pub first_day: i64,
    pub ctm_grid: GridSpec,
    pub sat_grid: GridSpec,
    /// Sites are kept this far (km) inside the shared domain.
    pub site_margin: f64,
    pub base: BaseField,
    pub proxy: ProxyConfig,
    pub ctm: SourceTruth,
    pub sat: SourceTruth,
    pub noise: NoiseLayout,
    pub weight: WeightTruth,
    pub response: Response,
    pub sat_missing_rate: f64,
    /// SD of day-to-day covariate noise around each site's static value.
    pub covariate_noise_sd: f64,
    /// Generate the full gridded proxies (needed for surfaces and CSV export).
    pub full_grids: bool,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            n_sites: 63,
            n_days: 365,
            first_day: 0,
            ctm_grid: GridSpec {
                origin_x: 0.0,
                origin_y: 0.0,
                cell_size: 12.0,
                n_rows: 50,
                n_cols: 50,
                source_tag: SourceTag::Ctm,
            },
            sat_grid: GridSpec {
                origin_x: 0.0,
                origin_y: 0.0,
                cell_size: 6.0,
                n_rows: 100,
                n_cols: 100,
                source_tag: SourceTag::Sat,
            },
            site_margin: 30.0,
            base: BaseField::default(),
            proxy: ProxyConfig::default(),
            ctm: SourceTruth::ctm_default(),
            sat: SourceTruth::sat_default(),
            noise: NoiseLayout::Uniform,
            weight: WeightTruth::default(),
            response: Response::Mixture,
            sat_missing_rate: 0.61,
            covariate_noise_sd: 0.3,
            full_grids: true,
            seed: 1,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FusionError::InvalidConfig(m.to_string()));
        if self.n_sites == 0 || self.n_days == 0 {
            return bad("scene needs at least one site and one day");
        }
        self.ctm_grid.validate()?;
        self.sat_grid.validate()?;
        if !(0.0..=1.0).contains(&self.sat_missing_rate) {
            return bad("sat_missing_rate must lie in [0, 1]");
        }
        if !(self.weight.tau2 > 0.0 && self.weight.rho > 0.0) {
            return bad("weight GP needs positive tau2 and rho");
        }
        if let NoiseLayout::HalfSplit { good, bad: b } = self.noise {
            if !(good >= 0.0 && b >= 0.0) {
                return bad("noise variances must be non-negative");
            }
        }
        if self.proxy.sat_scale == 0.0 {
            return bad("sat_scale must be non-zero");
        }
        self.ctm.validate("ctm")?;
        self.sat.validate("sat")?;
        let (x0, x1, y0, y1) = self.domain();
        if x1 - x0 <= 2.0 * self.site_margin || y1 - y0 <= 2.0 * self.site_margin {
            return bad("grids do not overlap enough to place sites");
        }
        Ok(())
    }

    /// Intersection of the two grid footprints `(x0, x1, y0, y1)`.
    pub fn domain(&self) -> (f64, f64, f64, f64) {
        let g = [&self.ctm_grid, &self.sat_grid];
        let x0 = g.iter().map(|g| g.origin_x).fold(f64::MIN, f64::max);
        let y0 = g.iter().map(|g| g.origin_y).fold(f64::MIN, f64::max);
        let x1 = g.iter().map(|g| g.origin_x + g.width()).fold(f64::MAX, f64::min);
        let y1 = g.iter().map(|g| g.origin_y + g.height()).fold(f64::MAX, f64::min);
        (x0, x1, y0, y1)
    }

    pub fn split_x(&self) -> f64 {
        let (x0, x1, _, _) = self.domain();
        0.5 * (x0 + x1)
    }

    pub fn source(&self, s: SourceTag) -> &SourceTruth {
        match s {
            SourceTag::Ctm => &self.ctm,
            SourceTag::Sat => &self.sat,
        }
    }
}

/// Latent effects of one source's downscaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceLatent {
    pub alpha0: Vec<f64>,
    pub beta0: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    /// Residual variance at each site.
    pub sigma2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneTruth {
    pub config: SceneConfig,
    pub sites: Vec<Location>,
    /// Static covariate value at each site.
    pub site_covariates: Vec<Covariates>,
    /// Model simulation, `[day][cell]`; empty unless `full_grids`.
    pub ctm_x: Vec<f64>,
    /// Satellite retrieval, `[day][cell]`, `NaN` where missing; empty unless `full_grids`.
    pub sat_x: Vec<f64>,
    pub ctm: SourceLatent,
    pub sat: SourceLatent,
    pub q: Vec<f64>,
    pub w: Vec<f64>,
    /// Per record: the two regime means, the chosen regime (1 or 2).
    pub m_ctm: Vec<f64>,
    pub m_sat: Vec<f64>,
    pub regime: Vec<u8>,
    pub table: ObservationTable,
    /// Exact component predictives `(m_k, sigma2_k)` at every monitor-day,
    /// bypassing the downscalers.
    pub inputs: PredictiveInput,
}

impl SceneTruth {
    pub fn latent(&self, s: SourceTag) -> &SourceLatent {
        match s {
            SourceTag::Ctm => &self.ctm,
            SourceTag::Sat => &self.sat,
        }
    }

    /// Value of a source at `(day index, cell)`, `None` when missing or
    /// when grids were not generated.
    pub fn grid_value(&self, s: SourceTag, t: usize, cell: usize) -> Option<f64> {
        let (g, v) = match s {
            SourceTag::Ctm => (&self.config.ctm_grid, &self.ctm_x),
            SourceTag::Sat => (&self.config.sat_grid, &self.sat_x),
        };
        let x = *v.get(t * g.n_cells() + cell)?;
        x.is_finite().then_some(x)
    }
}

/// Smooth random field from random Fourier features of a squared
/// exponential kernel; unit marginal variance.
#[derive(Debug, Clone)]
struct SmoothField {
    omega: Vec<(f64, f64)>,
    phase: Vec<f64>,
}

const N_FEATURES: usize = 64;

impl SmoothField {
    fn new(scale: f64, rng: &mut ChainRng) -> Self {
        let omega = (0..N_FEATURES)
            .map(|_| (std_normal(rng) / scale, std_normal(rng) / scale))
            .collect();
        let phase = (0..N_FEATURES)
            .map(|_| rng.random::<f64>() * std::f64::consts::TAU)
            .collect();
        SmoothField { omega, phase }
    }

    fn at(&self, x: f64, y: f64) -> f64 {
        let s: f64 = self
            .omega
            .iter()
            .zip(&self.phase)
            .map(|(&(a, b), &p)| (a * x + b * y + p).cos())
            .sum();
        s * (2.0 / N_FEATURES as f64).sqrt()
    }
}

fn ar1(n: usize, sd: f64, phi: f64, rng: &mut ChainRng) -> Vec<f64> {
    let innov = sd * (1.0 - phi * phi).max(0.0).sqrt();
    let mut out = Vec::with_capacity(n);
    let mut u = sd * std_normal(rng);
    for _ in 0..n {
        out.push(u);
        u = phi * u + innov * std_normal(rng);
    }
    out
}

/// Draw from the proper first-order CAR on `n` days.
fn car_draw(n: usize, eta: f64, sigma2: f64, rng: &mut ChainRng) -> Result<Vec<f64>> {
    if sigma2 == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let mut q = DMatrix::<f64>::zeros(n, n);
    for t in 0..n {
        q[(t, t)] = if n == 1 || t == 0 || t == n - 1 { 1.0 } else { 2.0 };
        if t + 1 < n {
            q[(t, t + 1)] = -eta;
            q[(t + 1, t)] = -eta;
        }
    }
    let f = CholFactor::with_policy(&q, JitterPolicy::exact_first())?;
    let z = DVector::from_fn(n, |_, _| std_normal(rng));
    Ok(f.solve_upper_transpose(&z).iter().map(|v| v * sigma2.sqrt()).collect())
}

/// Draw from a zero-mean exponential GP at `locs`.
pub fn gp_draw(locs: &[Location], params: &ExpCovParams, rng: &mut ChainRng) -> Result<Vec<f64>> {
    let c = exp_cov_matrix(&distance_matrix(locs), params);
    let f = CholFactor::new(&c)?;
    let z = DVector::from_fn(locs.len(), |_, _| std_normal(rng));
    Ok(f.mul_lower(&z).iter().cloned().collect())
}

fn site_sigma2(cfg: &SceneConfig, s: SourceTag, loc: &Location) -> f64 {
    match cfg.noise {
        NoiseLayout::Uniform => cfg.source(s).sigma2_y,
        NoiseLayout::HalfSplit { good, bad } => {
            let west = loc.x < cfg.split_x();
            match (s, west) {
                (SourceTag::Ctm, true) | (SourceTag::Sat, false) => good,
                _ => bad,
            }
        }
    }
}

fn latent_for(cfg: &SceneConfig, s: SourceTag, sites: &[Location], rng: &mut ChainRng) -> Result<SourceLatent> {
    let t = cfg.source(s);
    Ok(SourceLatent {
        alpha0: car_draw(cfg.n_days, t.eta_alpha0, t.sigma2_alpha0, rng)?,
        beta0: car_draw(cfg.n_days, t.eta_beta0, t.sigma2_beta0, rng)?,
        v1: gp_draw(sites, &ExpCovParams::unit(t.theta1)?, rng)?,
        v2: gp_draw(sites, &ExpCovParams::unit(t.theta2)?, rng)?,
        sigma2: sites.iter().map(|l| site_sigma2(cfg, s, l)).collect(),
    })
}

fn regime_mean(t: &SourceTruth, lat: &SourceLatent, s: usize, d: usize, x: f64, z: Option<&Covariates>) -> f64 {
    let alpha = t.level_a + lat.alpha0[d] + t.a[0] * lat.v1[s];
    let beta = t.level_b + lat.beta0[d] + t.a[1] * lat.v1[s] + t.a[2] * lat.v2[s];
    let mut m = alpha + beta * x;
    if let Some(z) = z {
        m += t.gamma.iter().zip(z).map(|(g, v)| g * v).sum::<f64>();
    }
    m
}

/// Separate streams per scene part, so changing one setting (say the
/// missingness rate) leaves the other parts unchanged.
mod streams {
    pub const SITES: u64 = 1;
    pub const FIELD: u64 = 2;
    pub const CTM: u64 = 3;
    pub const SAT: u64 = 4;
    pub const COV: u64 = 5;
    pub const WEIGHT: u64 = 6;
    pub const RESPONSE: u64 = 7;
    pub const GRID_CTM: u64 = 8;
    pub const GRID_SAT: u64 = 9;
    pub const MISSING: u64 = 10;
}

pub fn generate_scene(cfg: &SceneConfig) -> Result<SceneTruth> {
    cfg.validate()?;
    let seed = cfg.seed;
    let (x0, x1, y0, y1) = cfg.domain();
    let m = cfg.site_margin;
    let mut rng = stream_rng(seed, streams::SITES);
    let width = (cfg.n_sites.max(2) - 1).to_string().len();
    let sites: Vec<Location> = (0..cfg.n_sites)
        .map(|i| {
            let x = x0 + m + rng.random::<f64>() * (x1 - x0 - 2.0 * m);
            let y = y0 + m + rng.random::<f64>() * (y1 - y0 - 2.0 * m);
            Location::new(format!("m{i:0width$}"), x, y)
        })
        .collect();

    let mut rng = stream_rng(seed, streams::FIELD);
    let b = &cfg.base;
    let shape = SmoothField::new(b.spatial_scale, &mut rng);
    let shape2 = SmoothField::new(b.spatial_scale, &mut rng);
    let daily = ar1(cfg.n_days, b.temporal_sd, b.temporal_ar, &mut rng);
    let swing = ar1(cfg.n_days, 0.5 * b.spatial_sd, b.temporal_ar, &mut rng);
    let ctm_bias = SmoothField::new(b.spatial_scale, &mut rng);
    let sat_bias = SmoothField::new(b.spatial_scale, &mut rng);
    let field =
        |x: f64, y: f64, t: usize| b.level + b.spatial_sd * shape.at(x, y) + daily[t] + swing[t] * shape2.at(x, y);

    let ctm = latent_for(cfg, SourceTag::Ctm, &sites, &mut stream_rng(seed, streams::CTM))?;
    let sat = latent_for(cfg, SourceTag::Sat, &sites, &mut stream_rng(seed, streams::SAT))?;

    let mut rng = stream_rng(seed, streams::COV);
    let cov_fields: Vec<SmoothField> = (0..N_COVARIATES)
        .map(|_| SmoothField::new(b.spatial_scale, &mut rng))
        .collect();
    let site_covariates: Vec<Covariates> = sites
        .iter()
        .map(|l| std::array::from_fn(|k| cov_fields[k].at(l.x, l.y)))
        .collect();

    let mut rng = stream_rng(seed, streams::WEIGHT);
    let wt = &cfg.weight;
    let mut q = gp_draw(&sites, &ExpCovParams::new(wt.tau2, wt.rho)?, &mut rng)?;
    let split = cfg.split_x();
    for (qs, l) in q.iter_mut().zip(&sites) {
        *qs += if l.x < split { wt.split_offset } else { -wt.split_offset };
    }
    let w: Vec<f64> = q.iter().map(|&v| inv_logit(v)).collect();

    // proxies on the grids, cell values taken at cell centres
    let p = &cfg.proxy;
    let proxy_ctm =
        |x: f64, y: f64, t: usize, e: f64| field(x, y, t) + p.ctm_bias_sd * ctm_bias.at(x, y) + p.ctm_noise_sd * e;
    let proxy_sat = |x: f64, y: f64, t: usize, e: f64| {
        (field(x, y, t) + p.sat_bias_sd * sat_bias.at(x, y) + p.sat_noise_sd * e) / p.sat_scale
    };
    let n_days = cfg.n_days;
    let (mut ctm_x, mut sat_x) = (Vec::new(), Vec::new());
    let site_cells = |g: &GridSpec| -> Result<Vec<usize>> {
        sites
            .iter()
            .map(|l| g.locate(l.x, l.y).map(|(r, c)| g.flat(r, c)))
            .collect()
    };
    let ctm_cells = site_cells(&cfg.ctm_grid)?;
    let sat_cells = site_cells(&cfg.sat_grid)?;
    let mut rng_c = stream_rng(seed, streams::GRID_CTM);
    let mut rng_s = stream_rng(seed, streams::GRID_SAT);
    let mut rng_m = stream_rng(seed, streams::MISSING);
    let missing = |rng: &mut ChainRng| cfg.sat_missing_rate > 0.0 && rng.random::<f64>() < cfg.sat_missing_rate;
    // site-level values, used directly when grids are not generated
    let mut site_ctm = vec![0.0; cfg.n_sites * n_days];
    let mut site_sat = vec![f64::NAN; cfg.n_sites * n_days];
    if cfg.full_grids {
        let (gc, gs) = (&cfg.ctm_grid, &cfg.sat_grid);
        ctm_x.reserve(n_days * gc.n_cells());
        sat_x.reserve(n_days * gs.n_cells());
        let cc: Vec<(f64, f64)> = (0..gc.n_cells())
            .map(|i| gc.cell_center(i / gc.n_cols, i % gc.n_cols))
            .collect();
        let sc: Vec<(f64, f64)> = (0..gs.n_cells())
            .map(|i| gs.cell_center(i / gs.n_cols, i % gs.n_cols))
            .collect();
        for t in 0..n_days {
            for &(x, y) in &cc {
                ctm_x.push(proxy_ctm(x, y, t, std_normal(&mut rng_c)));
            }
            for &(x, y) in &sc {
                let v = proxy_sat(x, y, t, std_normal(&mut rng_s));
                sat_x.push(if missing(&mut rng_m) { f64::NAN } else { v });
            }
        }
        for s in 0..cfg.n_sites {
            for t in 0..n_days {
                site_ctm[s * n_days + t] = ctm_x[t * gc.n_cells() + ctm_cells[s]];
                site_sat[s * n_days + t] = sat_x[t * gs.n_cells() + sat_cells[s]];
            }
        }
    } else {
        for s in 0..cfg.n_sites {
            let (cx, cy) = cfg
                .ctm_grid
                .cell_center(ctm_cells[s] / cfg.ctm_grid.n_cols, ctm_cells[s] % cfg.ctm_grid.n_cols);
            let (sx, sy) = cfg
                .sat_grid
                .cell_center(sat_cells[s] / cfg.sat_grid.n_cols, sat_cells[s] % cfg.sat_grid.n_cols);
            for t in 0..n_days {
                site_ctm[s * n_days + t] = proxy_ctm(cx, cy, t, std_normal(&mut rng_c));
                let v = proxy_sat(sx, sy, t, std_normal(&mut rng_s));
                site_sat[s * n_days + t] = if missing(&mut rng_m) { f64::NAN } else { v };
            }
        }
    }

    let mut rng_cov = stream_rng(seed, streams::COV ^ 0xff);
    let mut rng = stream_rng(seed, streams::RESPONSE);
    let n = cfg.n_sites * n_days;
    let (mut records, mut entries) = (Vec::with_capacity(n), Vec::with_capacity(2 * n));
    let (mut m_ctm, mut m_sat, mut regime) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for s in 0..cfg.n_sites {
        for t in 0..n_days {
            let day = cfg.first_day + t as i64;
            let z: Covariates =
                std::array::from_fn(|k| site_covariates[s][k] + cfg.covariate_noise_sd * std_normal(&mut rng_cov));
            let xc = site_ctm[s * n_days + t];
            let xs = site_sat[s * n_days + t];
            let mc = regime_mean(&cfg.ctm, &ctm, s, t, xc, None);
            // the satellite regime exists even on days the retrieval is
            // missing; its mean then uses the unobserved field value
            let xs_latent = if xs.is_finite() {
                xs
            } else {
                let (sx, sy) = cfg
                    .sat_grid
                    .cell_center(sat_cells[s] / cfg.sat_grid.n_cols, sat_cells[s] % cfg.sat_grid.n_cols);
                proxy_sat(sx, sy, t, 0.0)
            };
            let ms = regime_mean(&cfg.sat, &sat, s, t, xs_latent, Some(&z));
            let k = match cfg.response {
                Response::Mixture => {
                    if rng.random::<f64>() < w[s] {
                        1
                    } else {
                        2
                    }
                }
                Response::Source(src) => src.component(),
            };
            let e = std_normal(&mut rng);
            let y = if k == 1 {
                mc + ctm.sigma2[s].sqrt() * e
            } else {
                ms + sat.sigma2[s].sqrt() * e
            };
            records.push(ObsRecord {
                site: s,
                day,
                y,
                x_ctm: xc,
                x_sat: xs.is_finite().then_some(xs),
                z,
            });
            entries.push(PredictiveEntry {
                site_id: sites[s].id.clone(),
                day,
                source: SourceTag::Ctm,
                mu: mc,
                var: ctm.sigma2[s],
                available: true,
            });
            entries.push(if xs.is_finite() {
                PredictiveEntry {
                    site_id: sites[s].id.clone(),
                    day,
                    source: SourceTag::Sat,
                    mu: ms,
                    var: sat.sigma2[s],
                    available: true,
                }
            } else {
                PredictiveEntry::unavailable(sites[s].id.clone(), day, SourceTag::Sat)
            });
            m_ctm.push(mc);
            m_sat.push(ms);
            regime.push(k);
        }
    }
    let table = ObservationTable::new(sites.clone(), records, cfg.first_day, n_days)?;
    Ok(SceneTruth {
        config: cfg.clone(),
        sites,
        site_covariates,
        ctm_x,
        sat_x,
        ctm,
        sat,
        q,
        w,
        m_ctm,
        m_sat,
        regime,
        table,
        inputs: PredictiveInput::new(entries),
    })
}

/// Discrete posterior of one site's weight on a grid of midpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPosterior {
    pub w: Vec<f64>,
    pub prob: Vec<f64>,
}

impl GridPosterior {
    pub fn mean(&self) -> f64 {
        self.w.iter().zip(&self.prob).map(|(w, p)| w * p).sum()
    }

    pub fn mass_above(&self, x: f64) -> f64 {
        self.w
            .iter()
            .zip(&self.prob)
            .filter(|(w, _)| **w > x)
            .map(|(_, p)| p)
            .sum()
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let mut c = 0.0;
        for (w, pr) in self.w.iter().zip(&self.prob) {
            c += pr;
            if c >= p {
                return *w;
            }
        }
        *self.w.last().unwrap_or(&f64::NAN)
    }
}

/// Exact grid posterior of `w` under a Beta(`prior_a`, `prior_b`) prior,
/// with the regime indicators summed out of the likelihood.
/// `inputs[k] = (mu1, var1, mu2, var2)` for reading `y[k]`.
pub fn brute_force_weight_posterior(
    y: &[f64],
    inputs: &[(f64, f64, f64, f64)],
    grid_size: usize,
    prior_a: f64,
    prior_b: f64,
) -> GridPosterior {
    assert_eq!(y.len(), inputs.len());
    let w: Vec<f64> = (0..grid_size).map(|k| (k as f64 + 0.5) / grid_size as f64).collect();
    let comp: Vec<(f64, f64)> = y
        .iter()
        .zip(inputs)
        .map(|(&y, &(m1, v1, m2, v2))| (normal_logpdf(y, m1, v1), normal_logpdf(y, m2, v2)))
        .collect();
    let logp: Vec<f64> = w
        .iter()
        .map(|&w| {
            let mut lp = (prior_a - 1.0) * w.ln() + (prior_b - 1.0) * (1.0 - w).ln();
            for &(l1, l2) in &comp {
                let a = w.ln() + l1;
                let b = (1.0 - w).ln() + l2;
                let hi = a.max(b);
                lp += hi + ((a - hi).exp() + (b - hi).exp()).ln();
            }
            lp
        })
        .collect();
    let top = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let un: Vec<f64> = logp.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = un.iter().sum();
    GridPosterior {
        w,
        prob: un.into_iter().map(|u| u / z).collect(),
    }
}

/// Mixture CDF evaluated through an independent Normal implementation.
pub fn brute_force_mixture_cdf(m: &MixtureDistribution, x: f64) -> f64 {
    let c = |mu: f64, var: f64| {
        if var > 0.0 {
            Normal::new(mu, var.sqrt()).expect("valid normal").cdf(x)
        } else if x >= mu {
            1.0
        } else {
            0.0
        }
    };
    m.w * c(m.mu1, m.var1) + (1.0 - m.w) * c(m.mu2, m.var2)
}
