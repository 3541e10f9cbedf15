//! The banded retrieval policy: a permutation-equivariant encoder over the
//! similarity scores, attention pooling, and two Beta heads that place a
//! quantile band on the similarity-ranked passage list.

mod band;
pub mod beta;
mod config;
pub mod network;
mod params;

pub use band::{band_log_prob, quantiles_to_indices, rank_order, sample_band, score_cmp, select, BandAction, BandParams};
pub use config::{HeadKind, PolicyConfig};
pub use network::{band_forward, infer_band_params, token_logits, BandForward, BandHeads, TokenForward};
pub use params::{BoundParams, Layout, PolicyParams, BAND_HEADS};

use alloc::vec::Vec;

use crate::error::Result;
use crate::rng::Rng;

/// One complete band decision for a score vector.
#[derive(Debug, Clone, PartialEq)]
pub struct BandDecision {
    pub params: BandParams,
    pub action: BandAction,
    pub lower: usize,
    pub upper: usize,
    pub selection: Vec<usize>,
}

/// Runs the policy, samples (or takes the mean of) a band and selects the
/// passages it covers.
pub fn decide_band(params: &PolicyParams, scores: &[f64], greedy: bool, rng: &mut Rng) -> Result<BandDecision> {
    let bp = infer_band_params(params, scores)?;
    let action = if greedy { bp.mean_action()? } else { sample_band(&bp, params.config().sample_clamp, rng)? };
    let (lower, upper) = quantiles_to_indices(scores.len(), action.q_l, action.q_u)?;
    let selection = select(scores, lower, upper)?;
    Ok(BandDecision { params: bp, action, lower, upper, selection })
}
