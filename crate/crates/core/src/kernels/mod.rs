//! Reusable statistical kernels shared by the downscaler and the ensemble.

pub mod car;
pub mod chol;
pub mod cov;
pub mod dist;
pub mod gp;

pub use car::{car_full_conditional, CarParams, CarPrecision, ETA_GRID_SIZE};
pub use chol::{chol_logdet, chol_solve, CholFactor, JitterPolicy};
pub use cov::{exp_corr, exp_cov_matrix, ExpCovParams};
pub use dist::{inv_logit, logit};
pub use gp::{gp_univariate_conditional, krige, GaussianSummary, GpPrecision, Kriger};
