//! Standard normal primitives with tail-safe ratios.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

/// Beyond this magnitude the Mills ratio is evaluated by continued fraction
/// instead of a pdf/cdf quotient.
const ASYMPTOTIC_CUTOFF: f64 = 8.0;

const CONTINUED_FRACTION_TERMS: u32 = 80;

pub fn pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Mills ratio `Q(u) / pdf(u)` where `Q(u) = 1 - cdf(u)` is the upper tail.
///
/// Finite for every finite `u`: the continued fraction takes over for large
/// positive arguments where both numerator and denominator underflow.
pub fn mills_ratio(u: f64) -> f64 {
    if u > ASYMPTOTIC_CUTOFF {
        // R(u) = 1 / (u + 1 / (u + 2 / (u + 3 / (u + ...))))
        let mut tail = u;
        for k in (1..=CONTINUED_FRACTION_TERMS).rev() {
            tail = u + f64::from(k) / tail;
        }
        1.0 / tail
    } else {
        cdf(-u) / pdf(u)
    }
}

/// Inverse of the standard normal cdf.
///
/// Acklam's rational approximation followed by one Halley refinement step.
pub fn probit(p: f64) -> f64 {
    assert!(p > 0.0 && p < 1.0, "probit is defined on (0, 1), got {p}");

    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.38357751867269e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const P_LOW: f64 = 0.02425;

    let x = if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        let q = (-2.0 * (1.0 - p).ln()).sqrt();
        -(((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    let err = cdf(x) - p;
    let u = err * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
    x - u / (1.0 + 0.5 * x * u)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_symmetry_and_center() {
        assert_eq!(cdf(0.0), 0.5);
        for &x in &[0.3, 1.7, 4.2] {
            assert!((cdf(x) + cdf(-x) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn mills_ratio_is_continuous_at_the_cutoff() {
        let below = mills_ratio(ASYMPTOTIC_CUTOFF - 1e-13);
        let above = mills_ratio(ASYMPTOTIC_CUTOFF + 1e-13);
        assert!((below - above).abs() / below < 1e-12, "{below} vs {above}");
    }

    #[test]
    fn mills_ratio_stays_finite_in_far_tail() {
        let r = mills_ratio(40.0);
        assert!(r.is_finite());
        // R(u) ~ 1/u - 1/u^3 + 3/u^5 for large u
        assert!((r - (1.0 / 40.0 - 1.0 / 64_000.0 + 3.0 / 102_400_000.0)).abs() < 1e-10);
    }

    #[test]
    fn probit_inverts_cdf() {
        for &p in &[1e-12, 1e-4, 0.02, 0.3, 0.5, 0.55, 0.9, 0.999_99] {
            let x = probit(p);
            assert!((cdf(x) - p).abs() <= 1e-15_f64.max(p * 1e-13), "p={p}");
        }
        assert_eq!(probit(0.5), 0.0);
    }
}
