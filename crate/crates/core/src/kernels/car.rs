//! First-order temporal CAR prior on a chain of consecutive days.
//!
//! Precision is `(D - eta W) / sigma2` where `W` links days one apart and
//! `D = diag(n_t)`; `n_t` is 1 at the two ends of the chain and 2 inside.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::gp::GaussianSummary;

/// Number of points in the discrete grid for the dependence parameter.
pub const ETA_GRID_SIZE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CarParams {
    pub dependence: f64,
    pub conditional_variance: f64,
    pub horizon: usize,
}

/// `eta` values: midpoints of 1,000 equal intervals of `[0, 1]`.
pub fn eta_grid_value(k: usize) -> f64 {
    (k as f64 + 0.5) / ETA_GRID_SIZE as f64
}

/// Nearest grid index for an arbitrary `eta` in `[0, 1]`.
pub fn eta_grid_index(eta: f64) -> usize {
    ((eta * ETA_GRID_SIZE as f64).floor() as isize).clamp(0, ETA_GRID_SIZE as isize - 1) as usize
}

#[inline]
pub fn neighbor_count(t: usize, horizon: usize) -> usize {
    if horizon <= 1 || t == 0 || t + 1 == horizon {
        1
    } else {
        2
    }
}

#[inline]
pub fn neighbor_sum(t: usize, series: &[f64]) -> f64 {
    let mut s = 0.0;
    if t > 0 {
        s += series[t - 1];
    }
    if t + 1 < series.len() {
        s += series[t + 1];
    }
    s
}

/// Full conditional of day `t` (0-based) given the rest of `series`.
pub fn car_full_conditional(t: usize, series: &[f64], c: &CarParams) -> GaussianSummary {
    let n = neighbor_count(t, series.len()) as f64;
    GaussianSummary::new(c.dependence * neighbor_sum(t, series) / n, c.conditional_variance / n)
}

/// Cached `log |D - eta W|` over the `eta` grid for one horizon.
#[derive(Debug, Clone)]
pub struct CarPrecision {
    horizon: usize,
    logdets: Vec<f64>,
}

impl CarPrecision {
    pub fn new(horizon: usize) -> Self {
        let logdets = (0..ETA_GRID_SIZE)
            .map(|k| tridiag_logdet(horizon, eta_grid_value(k)))
            .collect();
        CarPrecision { horizon, logdets }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn logdet(&self, k: usize) -> f64 {
        self.logdets[k]
    }

    /// `(x^T D x, x^T W x)`.
    pub fn quad_parts(&self, x: &[f64]) -> (f64, f64) {
        let t = x.len();
        let mut dx = 0.0;
        for (i, v) in x.iter().enumerate() {
            dx += neighbor_count(i, t) as f64 * v * v;
        }
        let wx = 2.0 * x.windows(2).map(|w| w[0] * w[1]).sum::<f64>();
        (dx, wx)
    }

    /// `x^T (D - eta W) x`.
    pub fn quad_form(&self, x: &[f64], eta: f64) -> f64 {
        let (dx, wx) = self.quad_parts(x);
        dx - eta * wx
    }

    /// Log density of `x` under the CAR prior, up to a constant.
    pub fn log_density(&self, x: &[f64], k: usize, sigma2: f64) -> f64 {
        0.5 * self.logdets[k] - 0.5 * x.len() as f64 * sigma2.ln() - 0.5 * self.quad_form(x, eta_grid_value(k)) / sigma2
    }

    /// Draws a grid index for `eta` from its full conditional.
    pub fn sample_eta<R: Rng + ?Sized>(&self, x: &[f64], sigma2: f64, rng: &mut R) -> usize {
        let (_, wx) = self.quad_parts(x);
        self.sample_eta_with(|k| 0.5 * self.logdets[k] + 0.5 * eta_grid_value(k) * wx / sigma2, rng)
    }

    /// Draws a grid index proportional to `exp(logw(k))`.
    pub fn sample_eta_with<R: Rng + ?Sized, F: Fn(usize) -> f64>(&self, logw: F, rng: &mut R) -> usize {
        let lw: Vec<f64> = (0..ETA_GRID_SIZE).map(logw).collect();
        let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = lw.iter().map(|v| (v - m).exp()).collect();
        let total: f64 = w.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        for (k, wk) in w.iter().enumerate() {
            acc += wk;
            if u < acc {
                return k;
            }
        }
        ETA_GRID_SIZE - 1
    }
}

/// `log |D - eta W|` for the chain graph via the LDL pivot recurrence.
pub fn tridiag_logdet(horizon: usize, eta: f64) -> f64 {
    if horizon == 0 {
        return 0.0;
    }
    let mut logdet = 0.0;
    let mut prev = 0.0;
    for t in 0..horizon {
        let d = neighbor_count(t, horizon) as f64;
        let pivot = if t == 0 { d } else { d - eta * eta / prev };
        logdet += pivot.ln();
        prev = pivot;
    }
    logdet
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interior_day_substitution() {
        let c = CarParams {
            dependence: 0.9,
            conditional_variance: 0.5,
            horizon: 3,
        };
        let g = car_full_conditional(1, &[2.0, 100.0, 4.0], &c);
        assert!((g.mean - 2.7).abs() < 1e-12);
        assert!((g.variance - 0.25).abs() < 1e-12);
    }

    #[test]
    fn endpoint_day_has_one_neighbor() {
        let c = CarParams {
            dependence: 1.0,
            conditional_variance: 1.0,
            horizon: 2,
        };
        let g = car_full_conditional(0, &[9.0, 3.0], &c);
        assert_eq!(g.mean, 3.0);
        assert_eq!(g.variance, 1.0);
    }

    #[test]
    fn independence_limit() {
        let c = CarParams {
            dependence: 0.0,
            conditional_variance: 2.0,
            horizon: 4,
        };
        assert_eq!(car_full_conditional(2, &[1.0, 5.0, -2.0, 8.0], &c).mean, 0.0);
    }

    #[test]
    fn grid_spans_unit_interval() {
        assert!((eta_grid_value(0) - 0.0005).abs() < 1e-15);
        assert!((eta_grid_value(ETA_GRID_SIZE - 1) - 0.9995).abs() < 1e-15);
        assert_eq!(eta_grid_index(eta_grid_value(417)), 417);
    }

    #[test]
    fn logdet_matches_dense() {
        for &(t, eta) in &[(2usize, 0.3), (5, 0.9), (12, 0.9995)] {
            let m = DMatrix::from_fn(t, t, |i, j| {
                if i == j {
                    neighbor_count(i, t) as f64
                } else if i.abs_diff(j) == 1 {
                    -eta
                } else {
                    0.0
                }
            });
            let dense = m
                .cholesky()
                .unwrap()
                .l()
                .diagonal()
                .iter()
                .map(|v| 2.0 * v.ln())
                .sum::<f64>();
            assert!((tridiag_logdet(t, eta) - dense).abs() < 1e-10);
        }
    }

    #[test]
    fn full_conditional_agrees_with_precision() {
        // mean = -sum_j P_tj x_j / P_tt for P = D - eta W
        let x = [0.3, -1.0, 2.0, 0.7, 1.1];
        let c = CarParams {
            dependence: 0.6,
            conditional_variance: 1.5,
            horizon: 5,
        };
        for t in 0..5 {
            let ptt = neighbor_count(t, 5) as f64;
            let off = neighbor_sum(t, &x) * -0.6;
            let g = car_full_conditional(t, &x, &c);
            assert!((g.mean - (-off / ptt)).abs() < 1e-12);
            assert!((g.variance - 1.5 / ptt).abs() < 1e-12);
        }
    }

    #[test]
    fn flat_likelihood_gives_uniform_eta() {
        // chi-square goodness of fit over all grid points
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let car = CarPrecision::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 100_000;
        let mut counts = vec![0usize; ETA_GRID_SIZE];
        for _ in 0..n {
            counts[car.sample_eta_with(|_| 0.0, &mut rng)] += 1;
        }
        let e = n as f64 / ETA_GRID_SIZE as f64;
        let stat: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((ETA_GRID_SIZE - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.001, "chi2 {stat}, p {p}");
    }

    proptest! {
        #[test]
        fn time_reversal_symmetry(xs in proptest::collection::vec(-5.0f64..5.0, 2..20), eta in 0.0f64..1.0) {
            let n = xs.len();
            let rev: Vec<f64> = xs.iter().rev().cloned().collect();
            let c = CarParams { dependence: eta, conditional_variance: 1.0, horizon: n };
            for t in 0..n {
                let a = car_full_conditional(t, &xs, &c);
                let b = car_full_conditional(n - 1 - t, &rev, &c);
                prop_assert!((a.mean - b.mean).abs() < 1e-12);
                prop_assert_eq!(a.variance, b.variance);
            }
        }
    }
}
