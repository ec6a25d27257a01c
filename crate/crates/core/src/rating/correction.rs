//! Truncated-Gaussian moment corrections for win and draw outcomes.
//!
//! With `d ~ N(t, 1)` the normalized performance difference, a win observes
//! `d > eps` and a draw observes `|d| < eps`. For either outcome the
//! truncated moments are `E[d] = t + v` and `Var[d] = 1 - w`.

use super::normal::{cdf, mills_ratio, pdf};

/// Corrections for a one-sided (win) truncation.
pub fn vw_win(t: f64, eps: f64) -> (f64, f64) {
    let x = t - eps;
    // pdf(x) / cdf(x) = 1 / R(-x)
    let v = 1.0 / mills_ratio(-x);
    let w = v * (v + x);
    (v, w.clamp(0.0, 1.0))
}

/// Corrections for a two-sided (draw) truncation.
pub fn vw_draw(t: f64, eps: f64) -> (f64, f64) {
    if eps <= 0.0 {
        // Degenerate band: the posterior collapses onto d = 0.
        return (-t, 1.0);
    }
    if t > 0.0 {
        let (v, w) = vw_draw(-t, eps);
        return (-v, w);
    }

    let lo = -eps - t;
    let hi = eps - t;
    let (v, w) = if lo < 0.0 {
        let z = cdf(hi) - cdf(lo);
        let v = (pdf(lo) - pdf(hi)) / z;
        (v, v * v + (hi * pdf(hi) - lo * pdf(lo)) / z)
    } else {
        // Both band edges sit in the upper tail; factor pdf(lo) out of every
        // term so nothing underflows.
        let ratio = (-2.0 * eps * (-t)).exp();
        let one_minus_ratio = -(-2.0 * eps * (-t)).exp_m1();
        let denom = mills_ratio(lo) - ratio * mills_ratio(hi);
        let v = one_minus_ratio / denom;
        (v, v * v + (hi * ratio - lo) / denom)
    };
    (v, w.clamp(0.0, 1.0))
}
