//! Fold plans for out-of-sample experiments and the four evaluation
//! statistics over held-out predictions.

use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ensemble::MixtureDistribution;
use crate::error::{FusionError, Result};
use crate::kernels::GaussianSummary;
use crate::mcmc::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoldKind {
    /// Records shuffled and dealt into `k` folds.
    KFold(usize),
    /// One fold per monitor.
    SpatialLomo,
}

impl FoldKind {
    pub fn label(&self) -> &'static str {
        match self {
            FoldKind::KFold(_) => "kfold",
            FoldKind::SpatialLomo => "spatial",
        }
    }
}

/// Assignment of `(site_id, day)` records to folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub kind: FoldKind,
    pub seed: u64,
    pub n_folds: usize,
    assignment: HashMap<(String, i64), usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, site_id: &str, day: i64) -> Option<usize> {
        self.assignment.get(&(site_id.to_string(), day)).copied()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut n = vec![0; self.n_folds];
        for &f in self.assignment.values() {
            n[f] += 1;
        }
        n
    }

    /// Fold id for each key, in the given order. Errors if any key is
    /// not covered by the plan.
    pub fn assign<'a>(&self, keys: impl IntoIterator<Item = (&'a str, i64)>) -> Result<Vec<usize>> {
        keys.into_iter()
            .map(|(s, d)| {
                self.fold_of(s, d)
                    .ok_or_else(|| FusionError::InvalidConfig(format!("record `{s}` day {d} is not in the fold plan")))
            })
            .collect()
    }
}

/// Builds a plan over the given record keys. The plan depends only on the
/// set of keys and the seed, not on their order.
pub fn make_folds<'a>(
    records: impl IntoIterator<Item = (&'a str, i64)>,
    kind: FoldKind,
    seed: u64,
) -> Result<FoldPlan> {
    let keys: BTreeSet<(&str, i64)> = records.into_iter().collect();
    let mut assignment = HashMap::with_capacity(keys.len());
    let n_folds = match kind {
        FoldKind::KFold(k) => {
            if k == 0 || k > keys.len() {
                return Err(FusionError::TooFewRecords(format!(
                    "{} records for {k} folds",
                    keys.len()
                )));
            }
            let mut order: Vec<(&str, i64)> = keys.into_iter().collect();
            order.shuffle(&mut stream_rng(seed, 0x464f_4c44));
            for (i, (s, d)) in order.into_iter().enumerate() {
                assignment.insert((s.to_string(), d), i % k);
            }
            k
        }
        FoldKind::SpatialLomo => {
            let sites: BTreeSet<&str> = keys.iter().map(|k| k.0).collect();
            if sites.len() < 2 {
                return Err(FusionError::TooFewRecords(format!(
                    "leave-one-monitor-out needs at least 2 sites, got {}",
                    sites.len()
                )));
            }
            let fold: HashMap<&str, usize> = sites.iter().enumerate().map(|(i, s)| (*s, i)).collect();
            for (s, d) in keys {
                assignment.insert((s.to_string(), d), fold[s]);
            }
            fold.len()
        }
    };
    Ok(FoldPlan {
        kind,
        seed,
        n_folds,
        assignment,
    })
}

/// A held-out predictive distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Predicted {
    Gaussian(GaussianSummary),
    Mixture(MixtureDistribution),
}

impl Predicted {
    pub fn mean(&self) -> f64 {
        match self {
            Predicted::Gaussian(g) => g.mean,
            Predicted::Mixture(m) => m.mean(),
        }
    }

    pub fn sd(&self) -> f64 {
        match self {
            Predicted::Gaussian(g) => g.sd(),
            Predicted::Mixture(m) => m.sd(),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match self {
            Predicted::Gaussian(g) => g.mean + g.sd() * crate::kernels::dist::std_normal_quantile(p),
            Predicted::Mixture(m) => m.quantile(p),
        }
    }

    pub fn interval95(&self) -> (f64, f64) {
        (self.quantile(0.025), self.quantile(0.975))
    }
}

impl From<GaussianSummary> for Predicted {
    fn from(g: GaussianSummary) -> Self {
        Predicted::Gaussian(g)
    }
}

impl From<MixtureDistribution> for Predicted {
    fn from(m: MixtureDistribution) -> Self {
        Predicted::Mixture(m)
    }
}

/// R^2 is the squared Pearson correlation of observed and predicted means.
pub const R2_DEFINITION: &str = "squared Pearson correlation between observed and posterior predictive mean";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    /// Percent of observations inside the central 95% interval.
    pub coverage95: f64,
    pub avg_posterior_sd: f64,
    pub r2: f64,
    pub n: usize,
}

pub fn evaluate(held_out: &[(f64, Predicted)]) -> Result<EvalReport> {
    if held_out.is_empty() {
        return Err(FusionError::EmptyInput("no held-out predictions to evaluate".into()));
    }
    let n = held_out.len() as f64;
    let (mut sse, mut cov, mut sd) = (0.0, 0usize, 0.0);
    for (y, p) in held_out {
        let m = p.mean();
        sse += (y - m) * (y - m);
        let (lo, hi) = p.interval95();
        if *y >= lo && *y <= hi {
            cov += 1;
        }
        sd += p.sd();
    }
    let ys: Vec<f64> = held_out.iter().map(|h| h.0).collect();
    let ms: Vec<f64> = held_out.iter().map(|h| h.1.mean()).collect();
    Ok(EvalReport {
        rmse: (sse / n).sqrt(),
        coverage95: 100.0 * cov as f64 / n,
        avg_posterior_sd: sd / n,
        r2: pearson(&ys, &ms).map_or(f64::NAN, |r| r * r),
        n: held_out.len(),
    })
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}
