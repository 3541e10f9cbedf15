//! Forward pass of the policy network on a [`Tape`].
//!
//! scores ─ periodic features ─ linear ─ layer norm ─ pre-norm encoder
//! blocks ─ attention pooling ─ MLP ─ four Beta heads (or, for the Bernoulli
//! ablation, a per-token logit straight off the encoder).
//!
//! A batch of score vectors is stacked into one token matrix; attention and
//! pooling stay within each item's rows, everything else is row-wise.

use alloc::vec::Vec;

use super::band::{rank_order, BandParams};
use super::params::{BoundParams, HeadIdx, LinearIdx, NormIdx, PolicyParams};
use crate::diffcore::{Segments, Tape, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

fn linear(tape: &mut Tape, bound: &BoundParams, idx: LinearIdx, x: Var) -> Result<Var> {
    let y = tape.matmul(x, bound.var(idx.weight))?;
    tape.add_row(y, bound.var(idx.bias))
}

fn norm(tape: &mut Tape, bound: &BoundParams, idx: NormIdx, x: Var) -> Result<Var> {
    tape.layer_norm(x, bound.var(idx.gain), bound.var(idx.bias), LN_EPS)
}

/// One token per score: `N × d_model`. Row-wise, so `scores` may be a stack
/// of several items.
pub fn periodic_embed(tape: &mut Tape, params: &PolicyParams, bound: &BoundParams, scores: &[f64]) -> Result<Var> {
    let layout = params.layout();
    let feats = tape.periodic(scores, bound.var(layout.freqs))?;
    let x = linear(tape, bound, layout.embed, feats)?;
    norm(tape, bound, layout.embed_norm, x)
}

/// Pre-norm self-attention blocks without positions or masking, so the map
/// is permutation-equivariant over tokens.
pub fn encode(tape: &mut Tape, params: &PolicyParams, bound: &BoundParams, tokens: Var, segments: &Segments) -> Result<Var> {
    let heads = params.config().n_heads;
    let mut h = tokens;
    for block in &params.layout().blocks {
        let a = norm(tape, bound, block.norm1, h)?;
        let q = linear(tape, bound, block.q, a)?;
        let k = linear(tape, bound, block.k, a)?;
        let v = linear(tape, bound, block.v, a)?;
        let att = tape.attention_segments(q, k, v, heads, segments)?;
        let o = linear(tape, bound, block.o, att)?;
        h = tape.add(h, o)?;

        let f = norm(tape, bound, block.norm2, h)?;
        let up = linear(tape, bound, block.up, f)?;
        let act = tape.gelu(up);
        let down = linear(tape, bound, block.down, act)?;
        h = tape.add(h, down)?;
    }
    Ok(h)
}

/// Pooling weights (`ΣN × 1`) and the pooled, MLP-transformed summaries, one
/// row per item.
pub struct Pooled {
    pub weights: Var,
    pub summary: Var,
}

pub fn attn_pool(tape: &mut Tape, params: &PolicyParams, bound: &BoundParams, h: Var, segments: &Segments) -> Result<Pooled> {
    let HeadIdx::Band { scorer, mlp, .. } = params.layout().head else {
        return Err(Error::usage("attention pooling needs a band-head policy"));
    };
    let logits = linear(tape, bound, scorer, h)?;
    let weights = tape.segment_softmax(logits, segments)?;
    let z = tape.segment_weighted_sum(weights, h, segments)?;
    let hidden = linear(tape, bound, mlp, z)?;
    let summary = tape.gelu(hidden);
    Ok(Pooled { weights, summary })
}

/// Tape handles of `(α_L, β_L, α_Δ, β_Δ)`, each `softplus(raw) + floor` and
/// one row per batch item.
#[derive(Debug, Clone, Copy)]
pub struct BandHeads {
    pub vars: [Var; 4],
}

impl BandHeads {
    pub fn params(&self, tape: &Tape) -> Vec<BandParams> {
        let rows = tape.dims(self.vars[0]).0;
        (0..rows)
            .map(|i| {
                let [al, bl, ad, bd] = self.vars.map(|v| tape.value(v)[i]);
                BandParams { alpha_l: al, beta_l: bl, alpha_delta: ad, beta_delta: bd }
            })
            .collect()
    }
}

pub fn beta_heads(tape: &mut Tape, params: &PolicyParams, bound: &BoundParams, summary: Var) -> Result<BandHeads> {
    let HeadIdx::Band { heads, .. } = &params.layout().head else {
        return Err(Error::usage("Beta heads need a band-head policy"));
    };
    let floor = params.config().param_floor;
    let mut vars = [summary; 4];
    for (slot, idx) in vars.iter_mut().zip(heads.iter()) {
        let raw = linear(tape, bound, *idx, summary)?;
        let pos = tape.softplus(raw);
        *slot = tape.affine(pos, 1.0, floor);
    }
    Ok(BandHeads { vars })
}

/// Result of running the band policy on a batch of score vectors.
pub struct BandForward {
    pub heads: BandHeads,
    pub params: Vec<BandParams>,
    /// Per item, original indices in ascending score order.
    pub orders: Vec<Vec<usize>>,
    pub segments: Segments,
    pub pool_weights: Var,
}

fn stack_sorted(batch: &[&[f64]]) -> Result<(Vec<f64>, Vec<Vec<usize>>, Segments)> {
    let mut stacked = Vec::new();
    let mut orders = Vec::with_capacity(batch.len());
    let mut lengths = Vec::with_capacity(batch.len());
    for scores in batch {
        check_scores(scores)?;
        let order = rank_order(scores);
        stacked.extend(order.iter().map(|&i| scores[i]));
        lengths.push(scores.len());
        orders.push(order);
    }
    let segments = Segments::from_lengths(&lengths)?;
    Ok((stacked, orders, segments))
}

/// Full band-policy forward pass. Each item's scores are presented in
/// ascending order.
pub fn band_forward(tape: &mut Tape, params: &PolicyParams, bound: &BoundParams, batch: &[&[f64]]) -> Result<BandForward> {
    let (stacked, orders, segments) = stack_sorted(batch)?;
    let tokens = periodic_embed(tape, params, bound, &stacked)?;
    let h = encode(tape, params, bound, tokens, &segments)?;
    let pooled = attn_pool(tape, params, bound, h, &segments)?;
    let heads = beta_heads(tape, params, bound, pooled.summary)?;
    let bp = heads.params(tape);
    Ok(BandForward { heads, params: bp, orders, segments, pool_weights: pooled.weights })
}

/// Per-passage logits of the Bernoulli ablation, `ΣN × 1` with each item in
/// ascending score order.
pub struct TokenForward {
    pub logits: Var,
    pub orders: Vec<Vec<usize>>,
    pub segments: Segments,
}

pub fn token_logits(tape: &mut Tape, params: &PolicyParams, bound: &BoundParams, batch: &[&[f64]]) -> Result<TokenForward> {
    let HeadIdx::Bernoulli { token } = params.layout().head else {
        return Err(Error::usage("token logits need a Bernoulli-head policy"));
    };
    let (stacked, orders, segments) = stack_sorted(batch)?;
    let tokens = periodic_embed(tape, params, bound, &stacked)?;
    let h = encode(tape, params, bound, tokens, &segments)?;
    let logits = linear(tape, bound, token, h)?;
    Ok(TokenForward { logits, orders, segments })
}

/// Beta parameters for `scores` without recording gradients anywhere else.
pub fn infer_band_params(params: &PolicyParams, scores: &[f64]) -> Result<BandParams> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    Ok(band_forward(&mut tape, params, &bound, &[scores])?.params[0])
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::usage("policy input has no passages"));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::Domain { op: "policy input", value: *bad });
    }
    Ok(())
}
