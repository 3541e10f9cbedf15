//! Gamma and Beta variates.
//!
//! Gamma draws use Marsaglia and Tsang's squeeze method; shapes below one are
//! boosted to `shape + 1` and scaled by `U^{1/shape}`. Draws are carried in
//! log space so a Beta ratio of two tiny Gammas never collapses to `0/0`.

use rand::Rng as _;
use rand_distr::{Open01, StandardNormal};

use crate::diffcore::special;
use crate::error::{Error, Result};
use crate::rng::Rng;

/// `ln X` for `X ~ Gamma(shape, 1)`.
pub fn ln_gamma_variate(shape: f64, rng: &mut Rng) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.sample(Open01);
        return ln_gamma_variate(shape + 1.0, rng) + special::ln(u) / shape;
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / special::sqrt(9.0 * d);
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.sample(Open01);
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || special::ln(u) < 0.5 * x2 + d * (1.0 - v + special::ln(v)) {
            return special::ln(d * v);
        }
    }
}

pub fn gamma_variate(shape: f64, rng: &mut Rng) -> f64 {
    special::exp(ln_gamma_variate(shape, rng))
}

/// `X / (X + Y)` with `X ~ Gamma(alpha)`, `Y ~ Gamma(beta)`.
pub fn beta_variate(alpha: f64, beta: f64, rng: &mut Rng) -> f64 {
    let lx = ln_gamma_variate(alpha, rng);
    let ly = ln_gamma_variate(beta, rng);
    special::sigmoid(lx - ly)
}

/// Beta log-density evaluated directly, without the tape.
pub fn beta_ln_pdf(x: f64, alpha: f64, beta: f64) -> Result<f64> {
    if !(x > 0.0 && x < 1.0) {
        return Err(Error::Domain { op: "beta log-density", value: x });
    }
    Ok((alpha - 1.0) * special::ln(x) + (beta - 1.0) * libm::log1p(-x) - special::ln_beta(alpha, beta)?)
}
