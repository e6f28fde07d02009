//! Block-Gibbs / Metropolis sampler for the downscaler.
//!
//! Mean structure for record `i` at site `s`, day `t`:
//!
//! ```text
//! mu_i = f0 + alpha0[t] + A11 v1[s]
//!      + (f1 + beta0[t] + A21 v1[s] + A22 v2[s]) * x_i
//!      + z_i . gamma
//! ```
//!
//! `f0`, `f1` are global levels (flat prior) so the CAR series are mean-zero
//! deviations; `gamma` acts on covariates standardized over the training
//! records.

use std::collections::{BTreeSet, HashMap};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ObservationTable, N_COVARIATES};
use crate::error::{FusionError, Result};
use crate::geo::{distance_matrix, DistanceMatrix, Location, SourceTag};
use crate::kernels::car::{eta_grid_index, eta_grid_value, neighbor_count, neighbor_sum, CarPrecision};
use crate::kernels::dist::{gamma_logpdf, normal_logpdf, sample_inv_gamma, std_normal};
use crate::kernels::{exp_cov_matrix, CholFactor, ExpCovParams, GaussianSummary, GpPrecision};
use crate::mcmc::{AdaptiveScale, ChainRng, MCMCConfig};

/// Prior variance of every coregionalization entry.
pub const A_PRIOR_VAR: f64 = 1.0e3;

/// One retained draw of every downscaler parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownscalerState {
    /// `[intercept level, slope level, gamma...]`, gamma on the standardized scale.
    pub fixed: Vec<f64>,
    pub alpha0: Vec<f64>,
    pub beta0: Vec<f64>,
    /// Lower-triangular coregionalization `[A11, A21, A22]`.
    pub a: [f64; 3],
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub sigma2_y: f64,
    pub eta_alpha0: f64,
    pub eta_beta0: f64,
    pub sigma2_alpha0: f64,
    pub sigma2_beta0: f64,
    pub theta1: f64,
    pub theta2: f64,
}

impl DownscalerState {
    pub fn alpha1(&self, s: usize) -> f64 {
        self.a[0] * self.v1[s]
    }

    pub fn beta1(&self, s: usize) -> f64 {
        self.a[1] * self.v1[s] + self.a[2] * self.v2[s]
    }

    /// Additive temporal intercept including the global level.
    pub fn alpha0_total(&self, t: usize) -> f64 {
        self.fixed[0] + self.alpha0[t]
    }

    pub fn beta0_total(&self, t: usize) -> f64 {
        self.fixed[1] + self.beta0[t]
    }

    pub fn gamma(&self) -> &[f64] {
        &self.fixed[2..]
    }

    /// Mean given latent values `(v1, v2)` at the location.
    #[inline]
    pub fn mean_with_latent(&self, t: usize, v1: f64, v2: f64, x: f64, z_std: &[f64]) -> f64 {
        let mut m = self.fixed[0]
            + self.alpha0[t]
            + self.a[0] * v1
            + (self.fixed[1] + self.beta0[t] + self.a[1] * v1 + self.a[2] * v2) * x;
        for (g, z) in self.fixed[2..].iter().zip(z_std) {
            m += g * z;
        }
        m
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub n_records: usize,
    pub n_sites: usize,
    pub theta1_accept: f64,
    pub theta2_accept: f64,
    pub theta1_proposal_var: f64,
    pub theta2_proposal_var: f64,
}

/// Retained posterior draws plus everything needed to predict elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DownscalerFit {
    pub source: SourceTag,
    /// Training sites, indexed like `v1`/`v2`.
    pub sites: Vec<Location>,
    pub first_day: i64,
    pub n_days: usize,
    /// Covariates entering the model (indices into the full vector);
    /// constant columns are dropped.
    pub active: Vec<usize>,
    pub cov_mean: Vec<f64>,
    pub cov_sd: Vec<f64>,
    pub samples: Vec<DownscalerState>,
    pub diagnostics: FitDiagnostics,
}

impl DownscalerFit {
    pub fn n_covariates(&self) -> usize {
        self.cov_mean.len()
    }

    pub fn standardize(&self, z: &[f64; N_COVARIATES], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = (z[self.active[k]] - self.cov_mean[k]) / self.cov_sd[k];
        }
    }

    /// Covariate effects per raw covariate unit, per retained sample, over
    /// all covariates (zero for dropped ones).
    pub fn gamma_raw(&self) -> Vec<Vec<f64>> {
        self.samples
            .iter()
            .map(|s| {
                let mut g = vec![0.0; N_COVARIATES];
                for (k, &j) in self.active.iter().enumerate() {
                    g[j] = s.gamma()[k] / self.cov_sd[k];
                }
                g
            })
            .collect()
    }

    pub fn site_lookup(&self) -> HashMap<&str, usize> {
        self.sites.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect()
    }

    pub fn posterior_mean_sigma2_y(&self) -> f64 {
        self.samples.iter().map(|s| s.sigma2_y).sum::<f64>() / self.samples.len().max(1) as f64
    }
}

/// Training records for one source in flat arrays.
#[derive(Debug, Clone)]
pub struct FitData {
    pub n: usize,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    pub site: Vec<usize>,
    pub day: Vec<usize>,
    /// Standardized covariates, row-major `n x p`.
    pub z: Vec<f64>,
    pub p: usize,
    pub active: Vec<usize>,
    pub by_day: Vec<Vec<usize>>,
    pub by_site: Vec<Vec<usize>>,
    pub sites: Vec<Location>,
    pub n_days: usize,
    pub first_day: i64,
    pub cov_mean: Vec<f64>,
    pub cov_sd: Vec<f64>,
}

impl FitData {
    pub fn build(data: &ObservationTable, source: SourceTag) -> Result<Self> {
        let with_records: BTreeSet<usize> = data.records.iter().map(|r| r.site).collect();
        let usable: Vec<usize> = (0..data.records.len())
            .filter(|&i| data.records[i].x(source).is_some())
            .collect();
        let usable_sites: BTreeSet<usize> = usable.iter().map(|&i| data.records[i].site).collect();
        if let Some(&s) = with_records.difference(&usable_sites).next() {
            return Err(FusionError::InsufficientData(format!(
                "site `{}` has no usable {} records",
                data.sites[s].id, source
            )));
        }
        if usable.is_empty() {
            return Err(FusionError::InsufficientData(format!("no usable {source} records")));
        }
        let site_map: HashMap<usize, usize> = usable_sites.iter().enumerate().map(|(k, &s)| (s, k)).collect();
        let sites: Vec<Location> = usable_sites.iter().map(|&s| data.sites[s].clone()).collect();
        let n = usable.len();
        let candidates: &[usize] = match source {
            SourceTag::Ctm => &[],
            SourceTag::Sat => &[0, 1, 2, 3, 4, 5],
        };
        let (mut active, mut cov_mean, mut cov_sd) = (Vec::new(), Vec::new(), Vec::new());
        for &k in candidates {
            let m = usable.iter().map(|&i| data.records[i].z[k]).sum::<f64>() / n as f64;
            let v = usable.iter().map(|&i| (data.records[i].z[k] - m).powi(2)).sum::<f64>() / n as f64;
            if v > 1e-20 * m.abs().max(1.0).powi(2) {
                active.push(k);
                cov_mean.push(m);
                cov_sd.push(v.sqrt());
            }
        }
        let p = active.len();
        let mut fd = FitData {
            n,
            y: Vec::with_capacity(n),
            x: Vec::with_capacity(n),
            site: Vec::with_capacity(n),
            day: Vec::with_capacity(n),
            z: Vec::with_capacity(n * p),
            p,
            active,
            by_day: vec![Vec::new(); data.n_days],
            by_site: vec![Vec::new(); sites.len()],
            sites,
            n_days: data.n_days,
            first_day: data.first_day,
            cov_mean,
            cov_sd,
        };
        for (k, &i) in usable.iter().enumerate() {
            let r = &data.records[i];
            let s = site_map[&r.site];
            let t = data.day_index(r.day);
            fd.y.push(r.y);
            fd.x.push(r.x(source).expect("filtered"));
            fd.site.push(s);
            fd.day.push(t);
            for j in 0..p {
                fd.z.push((r.z[fd.active[j]] - fd.cov_mean[j]) / fd.cov_sd[j]);
            }
            fd.by_day[t].push(k);
            fd.by_site[s].push(k);
        }
        Ok(fd)
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_fixed(&self) -> usize {
        2 + self.p
    }

    #[inline]
    fn design(&self, i: usize, j: usize) -> f64 {
        match j {
            0 => 1.0,
            1 => self.x[i],
            _ => self.z[i * self.p + j - 2],
        }
    }

    #[inline]
    fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }
}

/// Cached GP prior pieces for one latent process at its current range.
#[derive(Debug, Clone)]
struct LatentPrior {
    prec: GpPrecision,
}

impl LatentPrior {
    fn new(dist: &DistanceMatrix, theta: f64) -> Result<Self> {
        let c = exp_cov_matrix(dist, &ExpCovParams::unit(theta)?);
        Ok(LatentPrior {
            prec: GpPrecision::new(&c)?,
        })
    }

    fn loglik(&self, v: &[f64]) -> f64 {
        let vv = DVector::from_column_slice(v);
        let quad = vv.dot(&(&self.prec.precision * &vv));
        -0.5 * self.prec.logdet_cov - 0.5 * quad
    }
}

/// A single downscaler chain. Each `draw_*` method is one exact Gibbs block.
pub struct Chain {
    pub data: FitData,
    pub state: DownscalerState,
    pub cfg: MCMCConfig,
    resid: Vec<f64>,
    xtx_factor: CholFactor,
    dist: DistanceMatrix,
    car: CarPrecision,
    prior1: LatentPrior,
    prior2: LatentPrior,
    pub scale1: AdaptiveScale,
    pub scale2: AdaptiveScale,
}

impl Chain {
    pub fn new(data: FitData, cfg: &MCMCConfig) -> Result<Self> {
        let pf = data.n_fixed();
        let n = data.n;
        let mut xtx = DMatrix::<f64>::zeros(pf, pf);
        let mut xty = DVector::<f64>::zeros(pf);
        for i in 0..n {
            for a in 0..pf {
                let da = data.design(i, a);
                xty[a] += da * data.y[i];
                for b in 0..=a {
                    xtx[(a, b)] += da * data.design(i, b);
                }
            }
        }
        for a in 0..pf {
            for b in 0..a {
                xtx[(b, a)] = xtx[(a, b)];
            }
        }
        let xtx_factor = CholFactor::new(&xtx)?;
        let fixed: Vec<f64> = xtx_factor.solve(&xty).iter().cloned().collect();
        let mut rss = 0.0;
        for i in 0..n {
            let fit: f64 = (0..pf).map(|j| data.design(i, j) * fixed[j]).sum();
            rss += (data.y[i] - fit).powi(2);
        }
        let s2 = (rss / n.max(1) as f64).max(1e-6);
        let dist = distance_matrix(&data.sites);
        let diam = dist.diameter();
        let theta0 = if diam > 0.0 { diam / 4.0 } else { 100.0 };
        let ns = data.n_sites();
        let state = DownscalerState {
            a: [0.5 * s2.sqrt(), 0.0, 0.1 * fixed[1].abs() + 1e-3],
            fixed,
            alpha0: vec![0.0; data.n_days],
            beta0: vec![0.0; data.n_days],
            v1: vec![0.0; ns],
            v2: vec![0.0; ns],
            sigma2_y: s2,
            eta_alpha0: eta_grid_value(eta_grid_index(0.5)),
            eta_beta0: eta_grid_value(eta_grid_index(0.5)),
            sigma2_alpha0: 0.1 * s2,
            sigma2_beta0: 0.01 * (1.0 + 0.1 * s2),
            theta1: theta0,
            theta2: theta0,
        };
        let prior1 = LatentPrior::new(&dist, theta0)?;
        let prior2 = prior1.clone();
        let car = CarPrecision::new(data.n_days);
        let mut chain = Chain {
            resid: vec![0.0; n],
            data,
            state,
            cfg: cfg.clone(),
            xtx_factor,
            dist,
            car,
            prior1,
            prior2,
            scale1: AdaptiveScale::new(cfg.kappa_theta),
            scale2: AdaptiveScale::new(cfg.kappa_theta),
        };
        chain.refresh()?;
        Ok(chain)
    }

    /// Recomputes residuals and GP caches from `state`.
    pub fn refresh(&mut self) -> Result<()> {
        self.prior1 = LatentPrior::new(&self.dist, self.state.theta1)?;
        self.prior2 = LatentPrior::new(&self.dist, self.state.theta2)?;
        self.recompute_resid();
        Ok(())
    }

    pub fn mean_of(&self, i: usize) -> f64 {
        let d = &self.data;
        let s = d.site[i];
        self.state
            .mean_with_latent(d.day[i], self.state.v1[s], self.state.v2[s], d.x[i], d.z_row(i))
    }

    fn recompute_resid(&mut self) {
        for i in 0..self.data.n {
            self.resid[i] = self.data.y[i] - self.mean_of(i);
        }
    }

    pub fn residuals(&self) -> &[f64] {
        &self.resid
    }

    /// Full conditional of the global levels and gamma: `(mean, covariance)`.
    pub fn fixed_conditional(&self) -> (DVector<f64>, DMatrix<f64>) {
        let pf = self.data.n_fixed();
        let b = self.fixed_rhs();
        let mean = self.xtx_factor.solve(&b);
        let cov = self.xtx_factor.inverse() * self.state.sigma2_y;
        debug_assert_eq!(mean.len(), pf);
        (mean, cov)
    }

    fn fixed_rhs(&self) -> DVector<f64> {
        let pf = self.data.n_fixed();
        let mut b = DVector::zeros(pf);
        for i in 0..self.data.n {
            let fit: f64 = (0..pf).map(|j| self.data.design(i, j) * self.state.fixed[j]).sum();
            let r = self.resid[i] + fit;
            for j in 0..pf {
                b[j] += self.data.design(i, j) * r;
            }
        }
        b
    }

    pub fn draw_fixed(&mut self, rng: &mut ChainRng) {
        let pf = self.data.n_fixed();
        let b = self.fixed_rhs();
        let mean = self.xtx_factor.solve(&b);
        let z = DVector::from_fn(pf, |_, _| std_normal(rng));
        let draw = mean + self.xtx_factor.solve_upper_transpose(&z) * self.state.sigma2_y.sqrt();
        for i in 0..self.data.n {
            let mut delta = 0.0;
            for j in 0..pf {
                delta += self.data.design(i, j) * (draw[j] - self.state.fixed[j]);
            }
            self.resid[i] -= delta;
        }
        self.state.fixed = draw.iter().cloned().collect();
    }

    pub fn alpha0_conditional(&self, t: usize) -> GaussianSummary {
        let st = &self.state;
        let nt = neighbor_count(t, self.data.n_days) as f64;
        let prior_prec = nt / st.sigma2_alpha0;
        let prior_term = st.eta_alpha0 * neighbor_sum(t, &st.alpha0) / st.sigma2_alpha0;
        let mut prec = prior_prec;
        let mut rhs = prior_term;
        for &i in &self.data.by_day[t] {
            prec += 1.0 / st.sigma2_y;
            rhs += (self.resid[i] + st.alpha0[t]) / st.sigma2_y;
        }
        GaussianSummary::new(rhs / prec, 1.0 / prec)
    }

    pub fn draw_alpha0_day(&mut self, t: usize, rng: &mut ChainRng) {
        let g = self.alpha0_conditional(t);
        let new = g.mean + g.sd() * std_normal(rng);
        let delta = new - self.state.alpha0[t];
        for &i in &self.data.by_day[t] {
            self.resid[i] -= delta;
        }
        self.state.alpha0[t] = new;
    }

    pub fn beta0_conditional(&self, t: usize) -> GaussianSummary {
        let st = &self.state;
        let nt = neighbor_count(t, self.data.n_days) as f64;
        let mut prec = nt / st.sigma2_beta0;
        let mut rhs = st.eta_beta0 * neighbor_sum(t, &st.beta0) / st.sigma2_beta0;
        for &i in &self.data.by_day[t] {
            let x = self.data.x[i];
            prec += x * x / st.sigma2_y;
            rhs += x * (self.resid[i] + st.beta0[t] * x) / st.sigma2_y;
        }
        GaussianSummary::new(rhs / prec, 1.0 / prec)
    }

    pub fn draw_beta0_day(&mut self, t: usize, rng: &mut ChainRng) {
        let g = self.beta0_conditional(t);
        let new = g.mean + g.sd() * std_normal(rng);
        let delta = new - self.state.beta0[t];
        for &i in &self.data.by_day[t] {
            self.resid[i] -= delta * self.data.x[i];
        }
        self.state.beta0[t] = new;
    }

    /// Precision and right-hand side of the joint `(v1, v2)` conditional.
    pub fn latent_system(&self) -> (DMatrix<f64>, DVector<f64>) {
        let ns = self.data.n_sites();
        let st = &self.state;
        let mut p = DMatrix::<f64>::zeros(2 * ns, 2 * ns);
        p.view_mut((0, 0), (ns, ns)).copy_from(&self.prior1.prec.precision);
        p.view_mut((ns, ns), (ns, ns)).copy_from(&self.prior2.prec.precision);
        let mut rhs = DVector::<f64>::zeros(2 * ns);
        let inv = 1.0 / st.sigma2_y;
        for s in 0..ns {
            let (mut p11, mut p12, mut p22, mut r1, mut r2) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &i in &self.data.by_site[s] {
                let x = self.data.x[i];
                let d1 = st.a[0] + st.a[1] * x;
                let d2 = st.a[2] * x;
                let r = self.resid[i] + d1 * st.v1[s] + d2 * st.v2[s];
                p11 += d1 * d1;
                p12 += d1 * d2;
                p22 += d2 * d2;
                r1 += d1 * r;
                r2 += d2 * r;
            }
            p[(s, s)] += p11 * inv;
            p[(s, ns + s)] += p12 * inv;
            p[(ns + s, s)] += p12 * inv;
            p[(ns + s, ns + s)] += p22 * inv;
            rhs[s] = r1 * inv;
            rhs[ns + s] = r2 * inv;
        }
        (p, rhs)
    }

    pub fn draw_latent(&mut self, rng: &mut ChainRng) -> Result<()> {
        let ns = self.data.n_sites();
        let (p, rhs) = self.latent_system();
        let f = CholFactor::new(&p)?;
        let mean = f.solve(&rhs);
        let z = DVector::from_fn(2 * ns, |_, _| std_normal(rng));
        let draw = mean + f.solve_upper_transpose(&z);
        self.state.v1 = draw.rows(0, ns).iter().cloned().collect();
        self.state.v2 = draw.rows(ns, ns).iter().cloned().collect();
        self.recompute_resid();
        Ok(())
    }

    /// Precision and right-hand side for `(A11, A21, A22)`.
    pub fn coregionalization_system(&self) -> (Matrix3<f64>, Vector3<f64>) {
        let st = &self.state;
        let mut p = Matrix3::<f64>::identity() / A_PRIOR_VAR;
        let mut rhs = Vector3::<f64>::zeros();
        let inv = 1.0 / st.sigma2_y;
        for i in 0..self.data.n {
            let s = self.data.site[i];
            let x = self.data.x[i];
            let g = Vector3::new(st.v1[s], st.v1[s] * x, st.v2[s] * x);
            let r = self.resid[i] + g.dot(&Vector3::new(st.a[0], st.a[1], st.a[2]));
            p += g * g.transpose() * inv;
            rhs += g * (r * inv);
        }
        (p, rhs)
    }

    pub fn draw_coregionalization(&mut self, rng: &mut ChainRng) -> Result<()> {
        let (p, rhs) = self.coregionalization_system();
        let pd = DMatrix::from_iterator(3, 3, p.iter().cloned());
        let f = CholFactor::new(&pd)?;
        let mean = f.solve(&DVector::from_column_slice(rhs.as_slice()));
        let z = DVector::from_fn(3, |_, _| std_normal(rng));
        let draw = mean + f.solve_upper_transpose(&z);
        self.state.a = [draw[0], draw[1], draw[2]];
        self.reflect();
        self.recompute_resid();
        Ok(())
    }

    /// Sign convention `A11 >= 0`, `A22 >= 0`; flips leave every effect unchanged.
    fn reflect(&mut self) {
        let st = &mut self.state;
        if st.a[0] < 0.0 {
            st.a[0] = -st.a[0];
            st.a[1] = -st.a[1];
            st.v1.iter_mut().for_each(|v| *v = -*v);
        }
        if st.a[2] < 0.0 {
            st.a[2] = -st.a[2];
            st.v2.iter_mut().for_each(|v| *v = -*v);
        }
    }

    /// Inverse-Gamma `(shape, rate)` of the residual variance.
    pub fn sigma2_y_conditional(&self) -> (f64, f64) {
        let rss: f64 = self.resid.iter().map(|e| e * e).sum();
        (self.cfg.ig_a + 0.5 * self.data.n as f64, self.cfg.ig_b + 0.5 * rss)
    }

    pub fn draw_sigma2_y(&mut self, rng: &mut ChainRng) {
        let (a, b) = self.sigma2_y_conditional();
        self.state.sigma2_y = sample_inv_gamma(rng, a, b);
    }

    /// Inverse-Gamma `(shape, rate)` of a CAR conditional variance.
    pub fn car_variance_conditional(&self, series: &[f64], eta: f64) -> (f64, f64) {
        (
            self.cfg.ig_a + 0.5 * series.len() as f64,
            self.cfg.ig_b + 0.5 * self.car.quad_form(series, eta),
        )
    }

    pub fn draw_car_alpha(&mut self, rng: &mut ChainRng) {
        let (a, b) = self.car_variance_conditional(&self.state.alpha0, self.state.eta_alpha0);
        self.state.sigma2_alpha0 = sample_inv_gamma(rng, a, b);
        let k = self.car.sample_eta(&self.state.alpha0, self.state.sigma2_alpha0, rng);
        self.state.eta_alpha0 = eta_grid_value(k);
    }

    pub fn draw_car_beta(&mut self, rng: &mut ChainRng) {
        let (a, b) = self.car_variance_conditional(&self.state.beta0, self.state.eta_beta0);
        self.state.sigma2_beta0 = sample_inv_gamma(rng, a, b);
        let k = self.car.sample_eta(&self.state.beta0, self.state.sigma2_beta0, rng);
        self.state.eta_beta0 = eta_grid_value(k);
    }

    /// Log-normal random-walk step for latent range `j` (1 or 2).
    pub fn step_theta(&mut self, j: usize, rng: &mut ChainRng) -> bool {
        let (theta, v, prior, scale) = match j {
            1 => (self.state.theta1, &self.state.v1, &self.prior1, &self.scale1),
            _ => (self.state.theta2, &self.state.v2, &self.prior2, &self.scale2),
        };
        let proposal = theta * (scale.sd() * std_normal(rng)).exp();
        let (shape, rate) = (self.cfg.rho_prior_shape, self.cfg.rho_prior_rate);
        let candidate = if proposal.is_finite() && proposal > 0.0 {
            LatentPrior::new(&self.dist, proposal).ok()
        } else {
            None
        };
        let accepted = match candidate {
            Some(cand) => {
                let log_ratio = cand.loglik(v) - prior.loglik(v) + gamma_logpdf(proposal, shape, rate)
                    - gamma_logpdf(theta, shape, rate)
                    + proposal.ln()
                    - theta.ln();
                if rng.random::<f64>().ln() < log_ratio {
                    match j {
                        1 => {
                            self.state.theta1 = proposal;
                            self.prior1 = cand;
                        }
                        _ => {
                            self.state.theta2 = proposal;
                            self.prior2 = cand;
                        }
                    }
                    true
                } else {
                    false
                }
            }
            None => false,
        };
        match j {
            1 => self.scale1.record(accepted),
            _ => self.scale2.record(accepted),
        }
        accepted
    }

    /// One systematic sweep over every block.
    pub fn sweep(&mut self, rng: &mut ChainRng) -> Result<()> {
        self.draw_fixed(rng);
        for t in 0..self.data.n_days {
            self.draw_alpha0_day(t, rng);
        }
        for t in 0..self.data.n_days {
            self.draw_beta0_day(t, rng);
        }
        self.draw_latent(rng)?;
        self.draw_coregionalization(rng)?;
        self.draw_sigma2_y(rng);
        self.draw_car_alpha(rng);
        self.draw_car_beta(rng);
        self.step_theta(1, rng);
        self.step_theta(2, rng);
        Ok(())
    }

    pub fn freeze_adaptation(&mut self) {
        self.scale1.freeze();
        self.scale2.freeze();
    }

    /// Unnormalized joint log posterior at the current state.
    pub fn log_posterior(&self) -> f64 {
        log_posterior_parts(self, &self.state)
    }
}

fn log_posterior_parts(chain: &Chain, st: &DownscalerState) -> f64 {
    let cfg = &chain.cfg;
    let d = &chain.data;
    let mut lp = 0.0;
    for i in 0..d.n {
        let s = d.site[i];
        let m = st.mean_with_latent(d.day[i], st.v1[s], st.v2[s], d.x[i], d.z_row(i));
        lp += normal_logpdf(d.y[i], m, st.sigma2_y);
    }
    let ka = eta_grid_index(st.eta_alpha0);
    let kb = eta_grid_index(st.eta_beta0);
    lp += chain.car.log_density(&st.alpha0, ka, st.sigma2_alpha0);
    lp += chain.car.log_density(&st.beta0, kb, st.sigma2_beta0);
    if let (Ok(p1), Ok(p2)) = (
        LatentPrior::new(&chain.dist, st.theta1),
        LatentPrior::new(&chain.dist, st.theta2),
    ) {
        lp += p1.loglik(&st.v1) + p2.loglik(&st.v2);
    } else {
        return f64::NEG_INFINITY;
    }
    for a in st.a {
        lp += normal_logpdf(a, 0.0, A_PRIOR_VAR);
    }
    for s2 in [st.sigma2_y, st.sigma2_alpha0, st.sigma2_beta0] {
        // inverse-gamma log density up to a constant
        lp += -(cfg.ig_a + 1.0) * s2.ln() - cfg.ig_b / s2;
    }
    for th in [st.theta1, st.theta2] {
        lp += gamma_logpdf(th, cfg.rho_prior_shape, cfg.rho_prior_rate);
    }
    lp
}

/// Log posterior of an arbitrary state against the chain's data.
pub fn log_posterior(chain: &Chain, state: &DownscalerState) -> f64 {
    log_posterior_parts(chain, state)
}

pub fn fit_downscaler(data: &ObservationTable, source: SourceTag, mcmc: &MCMCConfig) -> Result<DownscalerFit> {
    mcmc.validate()?;
    let fd = FitData::build(data, source)?;
    let mut chain = Chain::new(fd, mcmc)?;
    let mut rng = mcmc.rng(source.component() as u64);
    let mut samples = Vec::with_capacity(mcmc.n_kept());
    for r in 0..mcmc.n_iter {
        if r == mcmc.burn_in || !mcmc.adapt {
            chain.freeze_adaptation();
        }
        chain.sweep(&mut rng)?;
        if mcmc.keeps(r) {
            samples.push(chain.state.clone());
        }
    }
    log::debug!(
        "{} downscaler: {} records, theta acceptance {:.2}/{:.2}",
        source,
        chain.data.n,
        chain.scale1.acceptance_rate(),
        chain.scale2.acceptance_rate()
    );
    let diagnostics = FitDiagnostics {
        n_records: chain.data.n,
        n_sites: chain.data.n_sites(),
        theta1_accept: chain.scale1.acceptance_rate(),
        theta2_accept: chain.scale2.acceptance_rate(),
        theta1_proposal_var: chain.scale1.variance,
        theta2_proposal_var: chain.scale2.variance,
    };
    Ok(DownscalerFit {
        source,
        sites: chain.data.sites.clone(),
        first_day: chain.data.first_day,
        n_days: chain.data.n_days,
        active: chain.data.active.clone(),
        cov_mean: chain.data.cov_mean.clone(),
        cov_sd: chain.data.cov_sd.clone(),
        samples,
        diagnostics,
    })
}
