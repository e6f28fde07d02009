//! Scalar densities, transforms and samplers.

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{FusionError, Result};

pub const W_CLAMP: f64 = 1e-12;
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

pub fn logit(w: f64) -> Result<f64> {
    if !(w > 0.0 && w < 1.0) {
        return Err(FusionError::DomainError(w));
    }
    Ok((w / (1.0 - w)).ln())
}

/// Logistic function clamped to `[1e-12, 1 - 1e-12]`.
pub fn inv_logit(q: f64) -> f64 {
    let w = if q >= 0.0 {
        1.0 / (1.0 + (-q).exp())
    } else {
        let e = q.exp();
        e / (1.0 + e)
    };
    w.clamp(W_CLAMP, 1.0 - W_CLAMP)
}

/// `log(1 + exp(q))` without overflow.
pub fn log1p_exp(q: f64) -> f64 {
    if q > 35.0 {
        q
    } else if q < -35.0 {
        q.exp()
    } else {
        q.exp().ln_1p()
    }
}

#[inline]
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    let d = x - mean;
    -LN_SQRT_2PI - 0.5 * var.ln() - 0.5 * d * d / var
}

#[inline]
pub fn normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    normal_logpdf(x, mean, var).exp()
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_cdf(x: f64, mean: f64, sd: f64) -> f64 {
    std_normal_cdf((x - mean) / sd)
}

/// Standard normal quantile (Acklam's rational approximation refined by one
/// Halley step against the erfc-based CDF).
pub fn std_normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let p_low = 0.02425;
    let x = if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    let e = std_normal_cdf(x) - p;
    let u = e * (2.0 * std::f64::consts::PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

/// Gamma log density with shape/rate parameterization.
pub fn gamma_logpdf(x: f64, shape: f64, rate: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * x.ln() - rate * x
}

pub fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Gamma draw, shape/rate.
pub fn sample_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    Gamma::new(shape, 1.0 / rate)
        .expect("gamma parameters are positive")
        .sample(rng)
}

/// Inverse-Gamma draw, shape/rate (`1 / Gamma(shape, rate)`).
pub fn sample_inv_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64, rate: f64) -> f64 {
    1.0 / sample_gamma(rng, shape, rate)
}

pub fn sample_beta<R: Rng + ?Sized>(rng: &mut R, a: f64, b: f64) -> f64 {
    Beta::new(a, b).expect("beta parameters are positive").sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn logit_half_is_zero() {
        assert_eq!(logit(0.5).unwrap(), 0.0);
        assert_eq!(inv_logit(0.0), 0.5);
    }

    #[test]
    fn logit_rejects_boundaries() {
        assert!(logit(0.0).is_err());
        assert!(logit(1.0).is_err());
        assert!(logit(f64::NAN).is_err());
    }

    #[test]
    fn inv_logit_clamps() {
        assert_eq!(inv_logit(800.0), 1.0 - W_CLAMP);
        assert_eq!(inv_logit(-800.0), W_CLAMP);
    }

    #[test]
    fn logit_round_trip_thousand_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let w: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            let back = inv_logit(logit(w).unwrap());
            assert!((back - w).abs() < 1e-12, "{w} -> {back}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for p in [1e-10, 1e-4, 0.025, 0.3, 0.5, 0.8, 0.975, 1.0 - 1e-7] {
            let z = std_normal_quantile(p);
            assert!((std_normal_cdf(z) - p).abs() < 1e-14 * p.max(1e-3) + 1e-15, "p={p}");
        }
        assert!((std_normal_quantile(0.975) - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn gamma_density_normalizes() {
        // trapezoid over a fine grid for Gamma(2.5, 0.5)
        let h = 1e-3;
        let total: f64 = (1..60_000)
            .map(|i| gamma_logpdf(i as f64 * h, 2.5, 0.5).exp() * h)
            .sum();
        assert!((total - 1.0).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn log1p_exp_matches_naive(q in -30.0f64..30.0) {
            prop_assert!((log1p_exp(q) - (1.0 + q.exp()).ln()).abs() < 1e-12);
        }
    }
}
