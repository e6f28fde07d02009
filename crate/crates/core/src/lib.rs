//! Bayesian ensemble fusion of two gridded PM2.5 proxies (a chemical
//! transport model and satellite AOD) with point monitor data.
//!
//! Each source is calibrated by a spatio-temporal downscaler; the two
//! predictive distributions are then mixed with a spatially varying weight
//! whose logit is a Gaussian process.

pub mod downscaler;
pub mod ensemble;
pub mod error;
pub mod geo;
pub mod io;
pub mod kernels;
pub mod mcmc;
pub mod metrics;
pub mod synth;

pub use downscaler::{
    cv_predict, fit_downscaler, predict_at, predict_grid, DownscalerFit, DownscalerState, ObsRecord, ObservationTable,
    PredictTarget, PredictiveEntry, PredictiveInput,
};
pub use ensemble::{
    fit_joint, fit_two_stage, krige_weights, predict_mixture, EnsembleData, EnsembleMethod, MixtureDistribution,
    WeightField, WeightPosterior,
};
pub use error::{FusionError, Result};
pub use geo::{GridSpec, Location, SourceTag};
pub use io::{run_pipeline, PipelineConfig};
pub use kernels::{ExpCovParams, GaussianSummary};
pub use mcmc::MCMCConfig;
pub use metrics::{evaluate, make_folds, EvalReport, FoldKind, FoldPlan, Predicted};
