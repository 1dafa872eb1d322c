//! Scalar helpers shared by the likelihood and regression code.

use std::f64::consts::PI;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Logistic function `1 / (1 + exp(-x))`, evaluated without overflow.
#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let ex = x.exp();
        ex / (1.0 + ex)
    }
}

/// Log-odds of a probability.
#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `log(1 + exp(x))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(expit(x))`.
#[inline]
pub fn log_expit(x: f64) -> f64 {
    -softplus(-x)
}

/// Log density of `N(mean, variance)` at `y`.
#[inline]
pub fn normal_logpdf(y: f64, mean: f64, variance: f64) -> f64 {
    let r = y - mean;
    -HALF_LN_2PI - 0.5 * variance.ln() - 0.5 * r * r / variance
}

/// Density of `N(mean, variance)` at `y`, computed directly.
pub fn normal_pdf(y: f64, mean: f64, variance: f64) -> f64 {
    let r = y - mean;
    (-0.5 * r * r / variance).exp() / (2.0 * PI * variance).sqrt()
}

/// `log(exp(a) + exp(b))`.
#[inline]
pub fn log_add_exp(a: f64, b: f64) -> f64 {
    let hi = a.max(b);
    if hi == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let lo = a.min(b);
    hi + (lo - hi).exp().ln_1p()
}

/// Sample mean; `NaN` for an empty slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Sample variance with the `n - 1` denominator; zero for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64
}

/// Linear-interpolation quantile (type 7) of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
