//! Scalar special functions and their derivatives.
//!
//! Everything routes through `libm`, so results are identical on every
//! target regardless of the platform math library.

use crate::error::{Error, Result};

pub const LN_2PI_HALF: f64 = 0.918_938_533_204_672_8; // ln(2π)/2

pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// Round half away from zero.
pub fn round_half_away(x: f64) -> f64 {
    libm::round(x)
}

/// Checked natural log.
pub fn log_checked(x: f64) -> Result<f64> {
    if x > 0.0 {
        Ok(libm::log(x))
    } else {
        Err(Error::Domain { op: "log", value: x })
    }
}

/// `ln(1 + eˣ)`, linear above 30 where `e⁻ˣ` is below rounding.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        libm::exp(x)
    } else {
        libm::log1p(libm::exp(x))
    }
}

/// Inverse of [`softplus`] for `y > 0`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        libm::log(libm::expm1(y))
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

const FRAC_1_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

const LANCZOS_G: f64 = 7.0;
#[allow(clippy::excessive_precision)]
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7, nine terms; reflection below 0.5).
pub fn lgamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain { op: "lgamma", value: x });
    }
    Ok(lgamma_pos(x))
}

fn lgamma_pos(x: f64) -> f64 {
    if x < 0.5 {
        // Γ(x)Γ(1−x) = π / sin(πx)
        let pi = core::f64::consts::PI;
        return libm::log(pi / libm::sin(pi * x)) - lgamma_pos(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    LN_2PI_HALF + (x + 0.5) * libm::log(t) - t + libm::log(acc)
}

/// `ψ(x) = d/dx ln Γ(x)` for `x > 0`: shift up to `x ≥ 6`, then the
/// asymptotic series through `x⁻¹⁰`.
pub fn digamma(x: f64) -> Result<f64> {
    if !(x > 0.0) || !x.is_finite() {
        return Err(Error::Domain { op: "digamma", value: x });
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < 6.0 {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv2
        * (1.0 / 12.0
            - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
    Ok(shift + libm::log(x) - 0.5 * inv - series)
}

/// `ln B(α, β)`.
pub fn ln_beta(a: f64, b: f64) -> Result<f64> {
    Ok(lgamma(a)? + lgamma(b)? - lgamma(a + b)?)
}
