//! Shared MCMC plumbing: run configuration, seeded streams and adaptive
//! random-walk proposal scales.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FusionError, Result};

pub type ChainRng = ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MCMCConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Proposal variance for the logit weights.
    pub kappa_w: f64,
    /// Proposal variance (log scale) for the weight GP range.
    pub kappa_rho: f64,
    /// Proposal variance (log scale) for the downscaler latent ranges.
    pub kappa_theta: f64,
    pub seed: u64,
    pub ig_a: f64,
    pub ig_b: f64,
    /// Gamma(shape, rate) prior on every GP range.
    pub rho_prior_shape: f64,
    pub rho_prior_rate: f64,
    /// Tune proposal scales during burn-in.
    pub adapt: bool,
}

impl Default for MCMCConfig {
    fn default() -> Self {
        MCMCConfig {
            n_iter: 10_000,
            burn_in: 5_000,
            thin: 4,
            kappa_w: 0.25,
            kappa_rho: 0.09,
            kappa_theta: 0.09,
            seed: 1,
            ig_a: 0.001,
            ig_b: 0.001,
            rho_prior_shape: 0.5,
            rho_prior_rate: 0.005,
            adapt: true,
        }
    }
}

impl MCMCConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FusionError::InvalidConfig(m.to_string()));
        if self.burn_in >= self.n_iter {
            return bad("burn_in must be smaller than n_iter");
        }
        if self.thin == 0 {
            return bad("thin must be at least 1");
        }
        if !(self.kappa_w > 0.0 && self.kappa_rho > 0.0 && self.kappa_theta > 0.0) {
            return bad("proposal variances must be positive");
        }
        if !(self.ig_a > 0.0 && self.ig_b > 0.0) {
            return bad("inverse-gamma hyperparameters must be positive");
        }
        if !(self.rho_prior_shape > 0.0 && self.rho_prior_rate > 0.0) {
            return bad("range prior parameters must be positive");
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        MCMCConfig { seed, ..self.clone() }
    }

    pub fn short(n_iter: usize, burn_in: usize, thin: usize) -> Self {
        MCMCConfig {
            n_iter,
            burn_in,
            thin,
            ..Default::default()
        }
    }

    /// Whether 0-based iteration `r` is kept.
    pub fn keeps(&self, r: usize) -> bool {
        r >= self.burn_in && (r + 1 - self.burn_in).is_multiple_of(self.thin)
    }

    pub fn n_kept(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    pub fn rng(&self, stream: u64) -> ChainRng {
        stream_rng(self.seed, stream)
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for a (seed, stream) pair.
pub fn stream_rng(seed: u64, stream: u64) -> ChainRng {
    ChaCha8Rng::seed_from_u64(splitmix(seed ^ splitmix(stream)))
}

/// Mixes several labels into one stream id.
pub fn stream_id(parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(0x5eed_u64, |acc, p| splitmix(acc ^ p.wrapping_mul(0x100_0000_01b3)))
}

/// Random-walk proposal variance tuned toward an acceptance band during
/// burn-in, frozen afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveScale {
    pub variance: f64,
    accepted: usize,
    proposed: usize,
    total_accepted: usize,
    total_proposed: usize,
    frozen: bool,
}

pub const ADAPT_WINDOW: usize = 50;
pub const TARGET_ACCEPT_LO: f64 = 0.30;
pub const TARGET_ACCEPT_HI: f64 = 0.45;

impl AdaptiveScale {
    pub fn new(variance: f64) -> Self {
        AdaptiveScale {
            variance,
            accepted: 0,
            proposed: 0,
            total_accepted: 0,
            total_proposed: 0,
            frozen: false,
        }
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.total_proposed += 1;
        if accepted {
            self.accepted += 1;
            self.total_accepted += 1;
        }
        if !self.frozen && self.proposed >= ADAPT_WINDOW {
            let rate = self.accepted as f64 / self.proposed as f64;
            if !(TARGET_ACCEPT_LO..=TARGET_ACCEPT_HI).contains(&rate) {
                let factor = (2.0 * (rate - 0.375)).exp();
                self.variance = (self.variance * factor * factor).clamp(1e-8, 1e4);
            }
            self.accepted = 0;
            self.proposed = 0;
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
        self.total_accepted = 0;
        self.total_proposed = 0;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Acceptance rate since the scale was frozen (or since creation).
    pub fn acceptance_rate(&self) -> f64 {
        if self.total_proposed == 0 {
            0.0
        } else {
            self.total_accepted as f64 / self.total_proposed as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn default_run_keeps_1250() {
        let c = MCMCConfig::default();
        assert_eq!(c.n_kept(), 1250);
        assert_eq!((0..c.n_iter).filter(|&r| c.keeps(r)).count(), 1250);
    }

    #[test]
    fn validate_rejects_bad_runs() {
        assert!(MCMCConfig::short(10, 10, 1).validate().is_err());
        assert!(MCMCConfig::short(10, 5, 0).validate().is_err());
        assert!(MCMCConfig::default().validate().is_ok());
    }

    #[test]
    fn streams_differ_and_repeat() {
        let a: u64 = stream_rng(1, 2).random();
        let b: u64 = stream_rng(1, 3).random();
        let c: u64 = stream_rng(1, 2).random();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn adaptation_moves_toward_band() {
        let mut s = AdaptiveScale::new(1.0);
        for _ in 0..ADAPT_WINDOW {
            s.record(false);
        }
        assert!(s.variance < 1.0);
        let v = s.variance;
        s.freeze();
        for _ in 0..ADAPT_WINDOW {
            s.record(true);
        }
        assert_eq!(s.variance, v);
        assert_eq!(s.acceptance_rate(), 1.0);
    }
}
