//! Fixed retrieval baselines and the per-passage Bernoulli policy used as
//! an ablation of the band head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::diffcore::{special, Segments, Tape, Var};
use crate::error::{Error, Result};
use crate::policy::{score_cmp, token_logits, PolicyParams};
use crate::rng::Rng;

/// A selection strategy as named on the command line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StrategySpec {
    TopK(usize),
    LongContext,
    AdaptiveK,
    LdarCheckpoint(String),
    BernoulliCheckpoint(String),
}

impl StrategySpec {
    /// Accepts `top_5`, `top-5`, `lc`, `long_context`, `adaptive_k`,
    /// `ldar:<path>` and `bernoulli:<path>`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(path) = s.strip_prefix("ldar:") {
            return Ok(StrategySpec::LdarCheckpoint(path.into()));
        }
        if let Some(path) = s.strip_prefix("bernoulli:") {
            return Ok(StrategySpec::BernoulliCheckpoint(path.into()));
        }
        match s {
            "lc" | "long_context" => return Ok(StrategySpec::LongContext),
            "adaptive_k" | "adaptive-k" => return Ok(StrategySpec::AdaptiveK),
            _ => {}
        }
        let k = s
            .strip_prefix("top_")
            .or_else(|| s.strip_prefix("top-"))
            .ok_or_else(|| Error::usage(format!("unknown strategy {s:?}")))?;
        let k: usize = k.parse().map_err(|_| Error::usage(format!("bad k in strategy {s:?}")))?;
        if k == 0 {
            return Err(Error::usage("top-k needs k >= 1"));
        }
        Ok(StrategySpec::TopK(k))
    }

    pub fn label(&self) -> String {
        match self {
            StrategySpec::TopK(k) => format!("top_{k}"),
            StrategySpec::LongContext => "lc".into(),
            StrategySpec::AdaptiveK => "adaptive_k".into(),
            StrategySpec::LdarCheckpoint(_) => "ldar".into(),
            StrategySpec::BernoulliCheckpoint(_) => "bernoulli".into(),
        }
    }

    pub fn is_learned(&self) -> bool {
        matches!(self, StrategySpec::LdarCheckpoint(_) | StrategySpec::BernoulliCheckpoint(_))
    }

    /// Selection of a non-learned strategy.
    pub fn select_fixed(&self, scores: &[f64]) -> Result<Vec<usize>> {
        match self {
            StrategySpec::TopK(k) => top_k(scores, *k),
            StrategySpec::LongContext => Ok(long_context(scores)),
            StrategySpec::AdaptiveK => Ok(adaptive_k(scores)),
            _ => Err(Error::usage(format!("{} needs a loaded checkpoint", self.label()))),
        }
    }
}

/// Indices by descending score; ties go to the lower index.
pub fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| score_cmp(scores[b], scores[a]));
    order
}

/// The `min(k, N)` highest-scoring indices, best first.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::usage("top-k needs k >= 1"));
    }
    let mut order = descending(scores);
    order.truncate(k);
    Ok(order)
}

pub fn long_context(scores: &[f64]) -> Vec<usize> {
    (0..scores.len()).collect()
}

/// Everything ranked above the largest drop between consecutive
/// descending scores. The first maximal gap wins.
pub fn adaptive_k(scores: &[f64]) -> Vec<usize> {
    let order = descending(scores);
    if order.len() <= 1 {
        return order;
    }
    let mut cut = 1;
    let mut best = f64::NEG_INFINITY;
    for j in 0..order.len() - 1 {
        let gap = scores[order[j]] - scores[order[j + 1]];
        if gap > best {
            best = gap;
            cut = j + 1;
        }
    }
    order[..cut].to_vec()
}

/// One Bernoulli-policy decision.
#[derive(Debug, Clone, PartialEq)]
pub struct BernoulliDecision {
    /// Selected original indices, ascending score order.
    pub selection: Vec<usize>,
    /// Inclusion mask over ascending score order.
    pub mask: Vec<bool>,
    /// `Σ [m·log p + (1 − m)·log(1 − p)]` of the final mask.
    pub log_prob: f64,
    /// Set when both draws were empty and the top passage was forced.
    pub forced: bool,
}

/// `log p` and `log(1 − p)` for `p = sigmoid(logit)`.
fn log_probs(logit: f64) -> (f64, f64) {
    (-special::softplus(-logit), -special::softplus(logit))
}

pub fn mask_log_prob(logits: &[f64], mask: &[bool]) -> f64 {
    logits.iter().zip(mask).fold(0.0, |a, (&l, &m)| {
        let (lp, lq) = log_probs(l);
        a + if m { lp } else { lq }
    })
}

/// Samples an inclusion mask from sorted-order logits. An empty draw is
/// retried once; a second empty draw selects the top passage only. With
/// `greedy` the mask is `{p > 1/2}`, again falling back to the top passage.
pub fn sample_mask(logits: &[f64], greedy: bool, rng: &mut Rng) -> (Vec<bool>, bool) {
    let draw = |rng: &mut Rng| -> Vec<bool> {
        logits.iter().map(|&l| rng.random::<f64>() < special::sigmoid(l)).collect()
    };
    let mut mask = if greedy { logits.iter().map(|&l| l > 0.0).collect() } else { draw(rng) };
    if !greedy && !mask.contains(&true) {
        mask = draw(rng);
    }
    let forced = !mask.contains(&true);
    if forced {
        if let Some(last) = mask.last_mut() {
            *last = true;
        }
    }
    (mask, forced)
}

fn decision(logits: &[f64], order: &[usize], greedy: bool, rng: &mut Rng) -> BernoulliDecision {
    let (mask, forced) = sample_mask(logits, greedy, rng);
    let selection = order.iter().zip(&mask).filter(|(_, &m)| m).map(|(&i, _)| i).collect();
    BernoulliDecision { log_prob: mask_log_prob(logits, &mask), selection, mask, forced }
}

/// Runs the Bernoulli policy on one score vector.
pub fn bernoulli_forward(params: &PolicyParams, scores: &[f64], greedy: bool, rng: &mut Rng) -> Result<BernoulliDecision> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = token_logits(&mut tape, params, &bound, &[scores])?;
    Ok(decision(tape.value(out.logits), &out.orders[0], greedy, rng))
}

/// Decisions for a batch of logits already on a tape, one RNG per item.
pub fn bernoulli_decisions(
    tape: &Tape,
    logits: Var,
    orders: &[Vec<usize>],
    segments: &Segments,
    greedy: bool,
    rngs: &mut [Rng],
) -> Vec<BernoulliDecision> {
    let values = tape.value(logits);
    segments
        .iter()
        .zip(orders)
        .zip(rngs.iter_mut())
        .map(|(((start, len), order), rng)| decision(&values[start..start + len], order, greedy, rng))
        .collect()
}

/// Per-item log-probabilities of the given masks as a `B × 1` tape column.
pub fn bernoulli_log_prob(tape: &mut Tape, logits: Var, segments: &Segments, masks: &[Vec<bool>]) -> Result<Var> {
    let flat: Vec<bool> = masks.iter().flatten().copied().collect();
    if masks.len() != segments.count() || flat.len() != segments.total() {
        return Err(Error::dim("bernoulli_log_prob", format!("{} masked tokens for {} logits", flat.len(), segments.total())));
    }
    // log p = −softplus(−l), log(1 − p) = −softplus(l)
    let signs: Vec<f64> = flat.iter().map(|&m| if m { -1.0 } else { 1.0 }).collect();
    let zeros = vec![0.0; signs.len()];
    let signed = tape.scale_shift(logits, signs, &zeros)?;
    let sp = tape.softplus(signed);
    let neg = tape.affine(sp, -1.0, 0.0);
    tape.segment_sum(neg, segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;
    use crate::policy::{HeadKind, PolicyConfig};
    use crate::rng;

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.2, 0.9, 0.5], 1).unwrap(), vec![1]);
        assert_eq!(top_k(&[0.5, 0.5, 0.1], 1).unwrap(), vec![0]);
        assert_eq!(top_k(&[0.0, -0.0, -0.5], 1).unwrap(), vec![0]);
        assert_eq!(top_k(&[-0.0, 0.0, -0.5], 1).unwrap(), vec![0]);
        let mut all = top_k(&[0.2, 0.9, 0.5], 3).unwrap();
        all.sort_unstable();
        assert_eq!(all, long_context(&[0.2, 0.9, 0.5]));
        assert_eq!(top_k(&[0.2, 0.9], 10).unwrap().len(), 2);
        assert!(matches!(top_k(&[0.2], 0), Err(Error::Usage(_))));
    }

    #[test]
    fn adaptive_k_examples() {
        let s = [0.45, 0.9, 0.5, 0.85];
        assert_eq!(adaptive_k(&s), vec![1, 3]);
        assert_eq!(adaptive_k(&[0.3]), vec![0]);
        assert_eq!(adaptive_k(&[0.4, 0.4, 0.4]), vec![0]);
    }

    #[test]
    fn strategy_labels_round_trip() {
        for s in ["top_1", "top_25", "lc", "adaptive_k"] {
            assert_eq!(StrategySpec::parse(s).unwrap().label(), s);
        }
        assert_eq!(StrategySpec::parse("top-5").unwrap(), StrategySpec::TopK(5));
        assert_eq!(StrategySpec::parse("ldar:run/ck.bin").unwrap(), StrategySpec::LdarCheckpoint("run/ck.bin".into()));
        assert!(StrategySpec::parse("top_0").is_err());
        assert!(StrategySpec::parse("rerank").is_err());
        assert!(StrategySpec::LdarCheckpoint("x".into()).select_fixed(&[0.1]).is_err());
    }

    #[test]
    fn half_probability_log_prob() {
        let lp = mask_log_prob(&[0.0; 3], &[true; 3]);
        assert!((lp - 3.0 * libm::log(0.5)).abs() < 1e-15);
        assert!((lp + 2.079_442).abs() < 1e-6);
    }

    #[test]
    fn greedy_mask_is_product_mode() {
        let (m, forced) = sample_mask(&[-1.0, 0.3, 2.0, -0.1], true, &mut rng::seeded(0));
        assert_eq!(m, vec![false, true, true, false]);
        assert!(!forced);
        let (m, forced) = sample_mask(&[-1.0, -2.0], true, &mut rng::seeded(0));
        assert_eq!(m, vec![false, true]);
        assert!(forced);
    }

    #[test]
    fn empty_draws_fall_back_to_top_passage() {
        let mut r = rng::seeded(4);
        for _ in 0..200 {
            let (m, forced) = sample_mask(&[-30.0; 5], false, &mut r);
            assert!(forced);
            assert_eq!(m, vec![false, false, false, false, true]);
        }
    }

    #[test]
    fn tape_log_prob_matches_direct_and_finite_differences() {
        let logits = [0.3, -1.2, 2.0, 0.0, -0.4];
        let mask = vec![true, false, true, false, true];
        let lp_of = |l: &[f64]| mask_log_prob(l, &mask);
        let mut tape = Tape::new();
        let x = tape.param("l", &Tensor::matrix(5, 1, logits.to_vec()).unwrap());
        let segs = Segments::single(5).unwrap();
        let lp = bernoulli_log_prob(&mut tape, x, &segs, core::slice::from_ref(&mask)).unwrap();
        assert!((tape.scalar(lp) - lp_of(&logits)).abs() < 1e-14);
        let g = tape.backward(lp).unwrap();
        let grad = g.of(x).unwrap().data();
        for j in 0..5 {
            let h = 1e-6;
            let (mut p, mut m) = (logits, logits);
            p[j] += h;
            m[j] -= h;
            let num = (lp_of(&p) - lp_of(&m)) / (2.0 * h);
            assert!((grad[j] - num).abs() / num.abs().max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn bernoulli_policy_runs_on_fresh_parameters() {
        let cfg = PolicyConfig { d_model: 16, n_layers: 1, n_heads: 2, ffn_dim: 32, n_frequencies: 4, ..PolicyConfig::default() }
            .with_head(HeadKind::Bernoulli);
        let p = PolicyParams::init(cfg, &mut rng::seeded(1)).unwrap();
        let scores = [0.1, 0.8, 0.4, 0.3];
        let d = bernoulli_forward(&p, &scores, false, &mut rng::seeded(2)).unwrap();
        assert!(!d.selection.is_empty());
        assert_eq!(d.mask.len(), 4);
        assert!(d.log_prob.is_finite() && d.log_prob < 0.0);
        let again = bernoulli_forward(&p, &scores, false, &mut rng::seeded(2)).unwrap();
        assert_eq!(d, again);
    }
}
