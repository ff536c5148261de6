//! Discretized probability models shared by the rate estimates on the tape
//! and the integer tables of the range coder.
//!
//! Every function evaluates in f64 regardless of the model precision, and the
//! bin masses use the `|delta|` form so the subtraction of CDF values happens
//! in the left tail where it is numerically benign.

use std::f64::consts::{LN_2, SQRT_2};

/// Probability floor applied to bin masses before taking logarithms.
pub const LIKELIHOOD_BOUND: f64 = 1e-9;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mass of `N(0, sigma^2)` on `[delta - 0.5, delta + 0.5]`.
pub fn gaussian_bin(delta: f64, sigma: f64) -> f64 {
    let a = delta.abs();
    normal_cdf((0.5 - a) / sigma) - normal_cdf((-0.5 - a) / sigma)
}

/// Mass of a logistic(loc, scale) on `[v - 0.5, v + 0.5]`.
pub fn logistic_bin(v: f64, loc: f64, scale: f64) -> f64 {
    let a = (v - loc).abs();
    sigmoid((0.5 - a) / scale) - sigmoid((-0.5 - a) / scale)
}

/// Bits and partial derivatives of `-log2 P(bin)` for a unit bin at
/// distance `delta` under a symmetric location-scale density.
///
/// Returns `(bits, d bits / d delta, d bits / d scale)`.
pub(crate) fn bin_bits_grad(
    delta: f64,
    scale: f64,
    cdf: impl Fn(f64) -> f64,
    pdf: impl Fn(f64) -> f64,
) -> (f64, f64, f64) {
    let a = delta.abs();
    let u = (0.5 - a) / scale;
    let l = (-0.5 - a) / scale;
    let p = cdf(u) - cdf(l);
    if p <= LIKELIHOOD_BOUND {
        return (-LIKELIHOOD_BOUND.log2(), 0.0, 0.0);
    }
    let bits = -p.log2();
    let dbits_dp = -1.0 / (p * LN_2);
    let dp_da = (pdf(l) - pdf(u)) / scale;
    let dp_ds = (l * pdf(l) - u * pdf(u)) / scale;
    let sign = if delta > 0.0 {
        1.0
    } else if delta < 0.0 {
        -1.0
    } else {
        0.0
    };
    (bits, dbits_dp * dp_da * sign, dbits_dp * dp_ds)
}

pub(crate) fn gaussian_bits_grad(delta: f64, sigma: f64) -> (f64, f64, f64) {
    bin_bits_grad(delta, sigma, normal_cdf, normal_pdf)
}

pub(crate) fn logistic_bits_grad(delta: f64, scale: f64) -> (f64, f64, f64) {
    bin_bits_grad(delta, scale, sigmoid, |x| {
        let s = sigmoid(x);
        s * (1.0 - s)
    })
}

/// Bits for one symbol under the Gaussian bin model with the likelihood floor.
pub fn gaussian_bits(delta: f64, sigma: f64) -> f64 {
    -gaussian_bin(delta, sigma).max(LIKELIHOOD_BOUND).log2()
}

pub fn logistic_bits(v: f64, loc: f64, scale: f64) -> f64 {
    -logistic_bin(v, loc, scale).max(LIKELIHOOD_BOUND).log2()
}
