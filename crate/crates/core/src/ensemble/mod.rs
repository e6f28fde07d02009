//! Two-component Normal mixture of the downscaler predictives with a
//! spatially varying weight on the model-simulation component, whose logit
//! is a Gaussian process.

mod cv;
mod joint;
mod krige;
mod mixture;
mod steps;
mod two_stage;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::downscaler::{ObservationTable, PredictiveInput};
use crate::error::{FusionError, Result};
use crate::geo::{Location, SourceTag};

pub use crate::mcmc::MCMCConfig;
pub use cv::{ensemble_cv_predict, fit_weights};
pub use joint::{fit_joint, JointOptions};
pub use krige::{krige_weights, WeightSummary};
pub use mixture::{predict_mixture, MixtureDistribution};
pub use steps::{
    tau2_conditional, update_q, update_rho, update_tau2, update_z, z_probability, z_probability_direct, WeightPrior,
};
pub use two_stage::{fit_two_stage, StageASummary};

/// One retained draw of the weight field at the ensemble sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightField {
    pub q: Vec<f64>,
    pub tau2: f64,
    pub rho: f64,
}

/// `z[s][k] = 1` when component 1 generated the `k`-th record of site `s`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LatentAssignment {
    pub z: Vec<Vec<u8>>,
}

impl LatentAssignment {
    pub fn ones(&self, s: usize) -> usize {
        self.z[s].iter().map(|&v| v as usize).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMethod {
    Joint,
    TwoStage,
}

impl EnsembleMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EnsembleMethod::Joint => "joint",
            EnsembleMethod::TwoStage => "two_stage",
        }
    }
}

impl std::str::FromStr for EnsembleMethod {
    type Err = FusionError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "joint" => Ok(EnsembleMethod::Joint),
            "two_stage" | "twostage" => Ok(EnsembleMethod::TwoStage),
            other => Err(FusionError::InvalidConfig(format!(
                "unknown ensemble variant `{other}`"
            ))),
        }
    }
}

/// Per-site posterior summary of the weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SiteWeight {
    pub w_mean: f64,
    pub w_lo: f64,
    pub w_hi: f64,
    pub q_mean: f64,
}

/// Weight posterior at the ensemble sites, from either estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightPosterior {
    pub method: EnsembleMethod,
    pub sites: Vec<Location>,
    pub samples: Vec<WeightField>,
    pub site_weights: Vec<SiteWeight>,
    /// Acceptance rate of the logit-weight updates; `None` when `q` is
    /// not sampled jointly.
    pub q_accept: Option<f64>,
    pub rho_accept: f64,
}

impl WeightPosterior {
    pub fn posterior_mean_w(&self) -> Vec<f64> {
        self.site_weights.iter().map(|s| s.w_mean).collect()
    }
}

/// A monitor measurement keyed by site and day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub site_id: String,
    pub day: i64,
    pub y: f64,
}

pub fn observations_of(table: &ObservationTable) -> Vec<Observation> {
    table
        .records
        .iter()
        .map(|r| Observation {
            site_id: table.sites[r.site].id.clone(),
            day: r.day,
            y: r.y,
        })
        .collect()
}

/// Records where both components are available, grouped by site.
#[derive(Debug, Clone, Default)]
pub struct SiteRecords {
    pub day: Vec<i64>,
    pub y: Vec<f64>,
    pub mu1: Vec<f64>,
    pub var1: Vec<f64>,
    pub mu2: Vec<f64>,
    pub var2: Vec<f64>,
}

impl SiteRecords {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn push(&mut self, day: i64, y: f64, c1: (f64, f64), c2: (f64, f64)) {
        self.day.push(day);
        self.y.push(y);
        self.mu1.push(c1.0);
        self.var1.push(c1.1);
        self.mu2.push(c2.0);
        self.var2.push(c2.1);
    }
}

#[derive(Debug, Clone, Default)]
pub struct EnsembleData {
    pub sites: Vec<Location>,
    pub records: Vec<SiteRecords>,
}

impl EnsembleData {
    /// Joins observations with both component predictives. Sites are taken
    /// from `locs` in order; observations at unknown sites are an error.
    pub fn build(obs: &[Observation], inputs: &PredictiveInput, locs: &[Location]) -> Result<Self> {
        let idx = inputs.index();
        let site_pos: HashMap<&str, usize> = locs.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
        let mut records = vec![SiteRecords::default(); locs.len()];
        for o in obs {
            let &s = site_pos
                .get(o.site_id.as_str())
                .ok_or_else(|| FusionError::InvalidConfig(format!("observation at unknown site `{}`", o.site_id)))?;
            let c1 = idx.get(&(o.site_id.as_str(), o.day, SourceTag::Ctm));
            let c2 = idx.get(&(o.site_id.as_str(), o.day, SourceTag::Sat));
            if let (Some(c1), Some(c2)) = (c1, c2) {
                if c1.available && c2.available {
                    if !(c1.var > 0.0 && c2.var > 0.0) {
                        return Err(FusionError::InvalidConfig(format!(
                            "non-positive predictive variance at `{}` day {}",
                            o.site_id, o.day
                        )));
                    }
                    records[s].push(o.day, o.y, (c1.mu, c1.var), (c2.mu, c2.var));
                }
            }
        }
        Ok(EnsembleData {
            sites: locs.to_vec(),
            records,
        })
    }

    pub fn from_parts(sites: Vec<Location>, records: Vec<SiteRecords>) -> Self {
        EnsembleData { sites, records }
    }

    pub fn n_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn n_records(&self) -> usize {
        self.records.iter().map(|r| r.len()).sum()
    }

    /// Drops sites without any usable record.
    pub fn nonempty(&self) -> EnsembleData {
        let keep: Vec<usize> = (0..self.n_sites()).filter(|&s| !self.records[s].is_empty()).collect();
        EnsembleData {
            sites: keep.iter().map(|&s| self.sites[s].clone()).collect(),
            records: keep.iter().map(|&s| self.records[s].clone()).collect(),
        }
    }
}

/// Per-site summary of weight draws.
pub(crate) fn summarize_draws(draws: &mut [f64]) -> (f64, f64, f64) {
    let n = draws.len();
    if n == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = draws.iter().sum::<f64>() / n as f64;
    draws.sort_by(|a, b| a.total_cmp(b));
    (mean, empirical_quantile(draws, 0.025), empirical_quantile(draws, 0.975))
}

/// Linear-interpolation quantile of sorted data.
pub(crate) fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = p * (n - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
