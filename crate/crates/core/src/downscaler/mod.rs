//! Spatio-temporal downscaler: calibrates one gridded source against the
//! monitors with additive temporal (CAR) and spatial (coregionalized GP)
//! random intercepts and slopes, then emits Normal posterior predictives.

mod cv;
mod predict;
mod sampler;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};
use crate::geo::{Location, SourceTag};

pub use cv::cv_predict;
pub use predict::{predict_at, predict_grid, GridTargets, PredictTarget};
pub use sampler::{fit_downscaler, log_posterior, Chain, DownscalerFit, DownscalerState, FitDiagnostics};

pub const N_COVARIATES: usize = 6;
pub const COVARIATE_NAMES: [&str; N_COVARIATES] = ["elev", "forest", "road", "emis", "wind", "temp"];

pub type Covariates = [f64; N_COVARIATES];

/// One monitor-day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsRecord {
    /// Index into [`ObservationTable::sites`].
    pub site: usize,
    pub day: i64,
    pub y: f64,
    pub x_ctm: f64,
    pub x_sat: Option<f64>,
    pub z: Covariates,
}

impl ObsRecord {
    pub fn x(&self, source: SourceTag) -> Option<f64> {
        match source {
            SourceTag::Ctm => Some(self.x_ctm),
            SourceTag::Sat => self.x_sat,
        }
    }
}

/// Monitor records on a contiguous calendar `first_day .. first_day + n_days`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationTable {
    pub sites: Vec<Location>,
    pub records: Vec<ObsRecord>,
    pub first_day: i64,
    pub n_days: usize,
}

impl ObservationTable {
    pub fn new(sites: Vec<Location>, records: Vec<ObsRecord>, first_day: i64, n_days: usize) -> Result<Self> {
        crate::geo::validate_locations(&sites)?;
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if r.site >= sites.len() {
                return Err(FusionError::InvalidConfig(format!(
                    "record refers to unknown site {}",
                    r.site
                )));
            }
            if r.day < first_day || r.day >= first_day + n_days as i64 {
                return Err(FusionError::InvalidConfig(format!(
                    "day {} outside calendar {}..{}",
                    r.day,
                    first_day,
                    first_day + n_days as i64
                )));
            }
            if !r.y.is_finite() || !r.x_ctm.is_finite() || r.x_sat.is_some_and(|v| !v.is_finite()) {
                return Err(FusionError::InvalidConfig(format!(
                    "non-finite value at site `{}` day {}",
                    sites[r.site].id, r.day
                )));
            }
            if r.z.iter().any(|v| !v.is_finite()) {
                return Err(FusionError::InvalidConfig(format!(
                    "non-finite covariate at site `{}` day {}",
                    sites[r.site].id, r.day
                )));
            }
            if !seen.insert((r.site, r.day)) {
                return Err(FusionError::InvalidConfig(format!(
                    "duplicate record for site `{}` day {}",
                    sites[r.site].id, r.day
                )));
            }
        }
        Ok(ObservationTable {
            sites,
            records,
            first_day,
            n_days,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn day_index(&self, day: i64) -> usize {
        (day - self.first_day) as usize
    }

    /// Same sites and calendar, selected records.
    pub fn subset(&self, idx: &[usize]) -> ObservationTable {
        ObservationTable {
            sites: self.sites.clone(),
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            first_day: self.first_day,
            n_days: self.n_days,
        }
    }

    pub fn site_index(&self) -> HashMap<&str, usize> {
        self.sites.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect()
    }

    pub fn record_key(&self, i: usize) -> (&str, i64) {
        let r = &self.records[i];
        (self.sites[r.site].id.as_str(), r.day)
    }
}

/// Normal posterior predictive of one source at one site-day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictiveEntry {
    pub site_id: String,
    pub day: i64,
    pub source: SourceTag,
    pub mu: f64,
    pub var: f64,
    pub available: bool,
}

impl PredictiveEntry {
    pub fn unavailable(site_id: impl Into<String>, day: i64, source: SourceTag) -> Self {
        PredictiveEntry {
            site_id: site_id.into(),
            day,
            source,
            mu: f64::NAN,
            var: f64::NAN,
            available: false,
        }
    }
}

/// Per-(site, day) pair of component predictives, the ensemble's input.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictiveInput {
    pub entries: Vec<PredictiveEntry>,
}

impl PredictiveInput {
    pub fn new(entries: Vec<PredictiveEntry>) -> Self {
        PredictiveInput { entries }
    }

    pub fn extend(&mut self, other: PredictiveInput) {
        self.entries.extend(other.entries);
    }

    /// `(site_id, day, source)` to entry.
    pub fn index(&self) -> HashMap<(&str, i64, SourceTag), &PredictiveEntry> {
        self.entries
            .iter()
            .map(|e| ((e.site_id.as_str(), e.day, e.source), e))
            .collect()
    }

    /// Sorted by site, day and source, giving a canonical order.
    pub fn sorted(mut self) -> Self {
        self.entries.sort_by(|a, b| {
            a.site_id
                .cmp(&b.site_id)
                .then(a.day.cmp(&b.day))
                .then(a.source.component().cmp(&b.source.component()))
        });
        self
    }
}
