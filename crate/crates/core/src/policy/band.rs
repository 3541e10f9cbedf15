use alloc::format;
use alloc::vec::Vec;

use super::beta::{beta_ln_pdf, beta_variate};
use super::network::BandHeads;
use crate::diffcore::{special, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Parameters of the lower-quantile Beta `(α_L, β_L)` and of the width
/// Beta `(α_Δ, β_Δ)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandParams {
    pub alpha_l: f64,
    pub beta_l: f64,
    pub alpha_delta: f64,
    pub beta_delta: f64,
}

impl BandParams {
    pub fn uniform() -> Self {
        BandParams { alpha_l: 1.0, beta_l: 1.0, alpha_delta: 1.0, beta_delta: 1.0 }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.alpha_l, self.beta_l, self.alpha_delta, self.beta_delta]
    }

    /// Joint log-density of an action, computed directly.
    pub fn log_prob(&self, action: &BandAction) -> Result<f64> {
        Ok(beta_ln_pdf(action.q_l, self.alpha_l, self.beta_l)?
            + beta_ln_pdf(action.q_delta, self.alpha_delta, self.beta_delta)?)
    }

    /// Action at the two Beta means, for diagnostic greedy evaluation.
    pub fn mean_action(&self) -> Result<BandAction> {
        let q_l = self.alpha_l / (self.alpha_l + self.beta_l);
        let q_delta = self.alpha_delta / (self.alpha_delta + self.beta_delta);
        let mut a = BandAction::compose(q_l, q_delta);
        a.log_prob = self.log_prob(&a)?;
        Ok(a)
    }
}

/// A sampled band: lower quantile, relative width, upper quantile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandAction {
    pub q_l: f64,
    pub q_delta: f64,
    pub q_u: f64,
    pub log_prob: f64,
}

impl BandAction {
    /// `q_U = q_L + (1 − q_L)·q_Δ`; `log_prob` left at zero.
    pub fn compose(q_l: f64, q_delta: f64) -> Self {
        BandAction { q_l, q_delta, q_u: q_l + (1.0 - q_l) * q_delta, log_prob: 0.0 }
    }
}

/// Draws `q_L ~ Beta(α_L, β_L)` then `q_Δ ~ Beta(α_Δ, β_Δ)`, each clamped to
/// `[clamp, 1 − clamp]`.
pub fn sample_band(p: &BandParams, clamp: f64, rng: &mut Rng) -> Result<BandAction> {
    let lo = clamp;
    let hi = 1.0 - clamp;
    let q_l = beta_variate(p.alpha_l, p.beta_l, rng).clamp(lo, hi);
    let q_delta = beta_variate(p.alpha_delta, p.beta_delta, rng).clamp(lo, hi);
    let mut a = BandAction::compose(q_l, q_delta);
    a.log_prob = p.log_prob(&a)?;
    Ok(a)
}

fn beta_log_density(tape: &mut Tape, xs: &[f64], alpha: Var, beta: Var) -> Result<Var> {
    if let Some(&x) = xs.iter().find(|&&x| !(x > 0.0 && x < 1.0)) {
        return Err(Error::Domain { op: "band log-probability", value: x });
    }
    let ln_x: Vec<f64> = xs.iter().map(|&x| special::ln(x)).collect();
    let ln_1mx: Vec<f64> = xs.iter().map(|&x| libm::log1p(-x)).collect();
    let neg = |v: &[f64]| v.iter().map(|a| -a).collect::<Vec<f64>>();
    let t_alpha = tape.scale_shift(alpha, ln_x.clone(), &neg(&ln_x))?;
    let t_beta = tape.scale_shift(beta, ln_1mx.clone(), &neg(&ln_1mx))?;
    let sum = tape.add(alpha, beta)?;
    let lg_sum = tape.lgamma(sum)?;
    let lg_a = tape.lgamma(alpha)?;
    let lg_b = tape.lgamma(beta)?;
    let mut acc = tape.add(t_alpha, t_beta)?;
    acc = tape.add(acc, lg_sum)?;
    acc = tape.sub(acc, lg_a)?;
    tape.sub(acc, lg_b)
}

/// `log π(a_i | s_i)` for each batch row, as a column connected to the head
/// outputs.
pub fn band_log_prob(tape: &mut Tape, heads: &BandHeads, actions: &[BandAction]) -> Result<Var> {
    let rows = tape.dims(heads.vars[0]).0;
    if actions.len() != rows {
        return Err(Error::dim("band_log_prob", format!("{} actions for {rows} head rows", actions.len())));
    }
    let [al, bl, ad, bd] = heads.vars;
    let q_l: Vec<f64> = actions.iter().map(|a| a.q_l).collect();
    let q_d: Vec<f64> = actions.iter().map(|a| a.q_delta).collect();
    let lower = beta_log_density(tape, &q_l, al, bl)?;
    let width = beta_log_density(tape, &q_d, ad, bd)?;
    tape.add(lower, width)
}

/// Maps a quantile band to one-based sorted positions `(ℓ, u)` with
/// `ℓ = max(1, round(N·q_L))`, `u = min(N, max(ℓ, round(N·q_U)))`, rounding
/// half away from zero.
pub fn quantiles_to_indices(n: usize, q_l: f64, q_u: f64) -> Result<(usize, usize)> {
    if n == 0 {
        return Err(Error::usage("band over an empty passage list"));
    }
    if !(0.0..=1.0).contains(&q_l) || !(0.0..=1.0).contains(&q_u) {
        return Err(Error::usage(format!("quantiles ({q_l}, {q_u}) outside [0, 1]")));
    }
    if q_u < q_l {
        return Err(Error::usage(format!("upper quantile {q_u} below lower quantile {q_l}")));
    }
    let nf = n as f64;
    let lower = (round_edge(nf * q_l) as usize).max(1);
    let upper = (round_edge(nf * q_u) as usize).max(lower).min(n);
    Ok((lower.min(n), upper))
}

/// Half-away rounding of a non-negative `x`, treating values within four
/// ulps of a half as exact halves: `25 × 0.58` evaluates to
/// `14.499999999999998` and rounds to 15 like `25 × 58/100`.
fn round_edge(x: f64) -> f64 {
    let f = libm::floor(x);
    if (x - f - 0.5).abs() <= 4.0 * f64::EPSILON * x.max(1.0) {
        f + 1.0
    } else {
        special::round_half_away(x)
    }
}

/// Total order on scores with `-0.0 == 0.0`.
pub fn score_cmp(a: f64, b: f64) -> core::cmp::Ordering {
    (a + 0.0).total_cmp(&(b + 0.0))
}

/// Original indices sorted by ascending score; ties keep index order.
pub fn rank_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| score_cmp(scores[a], scores[b]));
    order
}

/// Passages at sorted positions `ℓ..=u` (one-based), returned in ascending
/// score order.
pub fn select(scores: &[f64], lower: usize, upper: usize) -> Result<Vec<usize>> {
    if lower < 1 || lower > upper || upper > scores.len() {
        return Err(Error::usage(format!("band ({lower}, {upper}) invalid for {} passages", scores.len())));
    }
    Ok(rank_order(scores)[lower - 1..upper].to_vec())
}

#[cfg(test)]
mod tests {
    use alloc::vec;

    use super::*;
    use crate::rng;

    #[test]
    fn composition_formula() {
        let a = BandAction::compose(0.25, 0.5);
        assert_eq!(a.q_u, 0.625);
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let p = BandParams { alpha_l: 0.7, beta_l: 2.0, alpha_delta: 3.0, beta_delta: 0.4 };
        let a = sample_band(&p, 1e-6, &mut rng::seeded(3)).unwrap();
        let b = sample_band(&p, 1e-6, &mut rng::seeded(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_actions_respect_band_invariants() {
        let mut r = rng::seeded(8);
        let clamp = 1e-6;
        for &(al, bl, ad, bd) in &[(1e-4, 1e-4, 1e-4, 1e-4), (50.0, 0.01, 0.01, 50.0), (1.0, 1.0, 1.0, 1.0)] {
            let p = BandParams { alpha_l: al, beta_l: bl, alpha_delta: ad, beta_delta: bd };
            for _ in 0..2000 {
                let a = sample_band(&p, clamp, &mut r).unwrap();
                assert!(clamp <= a.q_l && a.q_l <= a.q_u);
                assert!(a.q_u <= 1.0 - clamp * (1.0 - a.q_l) + 1e-15);
                assert!(a.log_prob.is_finite());
                for n in [1, 7, 52] {
                    let (l, u) = quantiles_to_indices(n, a.q_l, a.q_u).unwrap();
                    assert!(1 <= l && l <= u && u <= n);
                }
            }
        }
    }

    #[test]
    fn uniform_heads_have_zero_log_density() {
        let p = BandParams::uniform();
        for (ql, qd) in [(0.1, 0.9), (0.5, 0.5), (0.99, 0.01)] {
            let a = BandAction::compose(ql, qd);
            assert!(p.log_prob(&a).unwrap().abs() < 1e-14);
        }
    }

    #[test]
    fn tape_log_prob_matches_direct() {
        let mut tape = Tape::new();
        let vars = [2.0, 2.0, 0.5, 5.0].map(|v| tape.constant(1, 1, vec![v]).unwrap());
        let heads = BandHeads { vars };
        let a = BandAction::compose(0.5, 0.3);
        let lp = band_log_prob(&mut tape, &heads, &[a]).unwrap();
        let direct = BandParams { alpha_l: 2.0, beta_l: 2.0, alpha_delta: 0.5, beta_delta: 5.0 }.log_prob(&a).unwrap();
        assert!((tape.scalar(lp) - direct).abs() < 1e-13);

        let edge = BandAction::compose(0.0, 0.5);
        assert!(matches!(band_log_prob(&mut tape, &heads, &[edge]), Err(Error::Domain { .. })));
    }

    #[test]
    fn log_prob_gradient_matches_digamma_form() {
        // ∂/∂α ln Beta(x; α, β) = ln x − ψ(α) + ψ(α+β)
        let (al, bl, x) = (1.7, 0.6, 0.3);
        let mut tape = Tape::new();
        let vars = [al, bl, 1.0, 1.0].map(|v| tape.param("h", &crate::diffcore::Tensor::scalar(v)));
        let heads = BandHeads { vars };
        let lp = band_log_prob(&mut tape, &heads, &[BandAction::compose(x, 0.5)]).unwrap();
        let g = tape.backward(lp).unwrap();
        let ga = g.of(vars[0]).unwrap().data()[0];
        let expect = libm::log(x) - special::digamma(al).unwrap() + special::digamma(al + bl).unwrap();
        assert!((ga - expect).abs() < 1e-12);
    }

    #[test]
    fn algorithm_mapping_examples() {
        assert_eq!(quantiles_to_indices(100, 0.30, 0.60).unwrap(), (30, 60));
        assert_eq!(quantiles_to_indices(100, 0.0, 0.0).unwrap(), (1, 1));
        assert_eq!(quantiles_to_indices(7, 0.5, 0.5).unwrap(), (4, 4));
        assert_eq!(quantiles_to_indices(5, 0.0, 1.0).unwrap(), (1, 5));
        assert_eq!(quantiles_to_indices(25, 0.58, 0.58).unwrap(), (15, 15));
        assert_eq!(quantiles_to_indices(50, 0.29, 0.57).unwrap(), (15, 29));
        assert_eq!(quantiles_to_indices(25, 0.579, 0.58).unwrap(), (14, 15));
        assert!(matches!(quantiles_to_indices(10, 0.6, 0.5), Err(Error::Usage(_))));
        assert!(quantiles_to_indices(0, 0.1, 0.2).is_err());
    }

    #[test]
    fn select_examples() {
        assert_eq!(select(&[0.9, 0.1, 0.5], 3, 3).unwrap(), vec![0]);
        assert_eq!(select(&[0.9, 0.1, 0.5], 1, 3).unwrap(), vec![1, 2, 0]);
        // duplicates 0.5 at indices 1 and 4 sit at sorted positions 3 and 4
        let s = [0.2, 0.5, 0.9, 0.1, 0.5];
        assert_eq!(select(&s, 3, 4).unwrap(), vec![1, 4]);
        assert_eq!(select(&s, 4, 5).unwrap(), vec![4, 2]);
        assert!(select(&s, 0, 2).is_err());
        assert!(select(&s, 3, 6).is_err());
    }
}
