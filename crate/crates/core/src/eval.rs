//! One-pass evaluation of any strategy over a set of instances.

use alloc::string::String;
use alloc::vec::Vec;

use crate::diffcore::Tape;
use crate::environ::{self, AnswerOracle, Instance};
use crate::error::{Error, Result};
use crate::policy::{band_forward, quantiles_to_indices, rank_order, sample_band, HeadKind, PolicyParams};
use crate::rng::{self, Rng};
use crate::strategies::{bernoulli_decisions, StrategySpec};
use crate::policy::token_logits;

/// Outcome on one instance. Band positions are one-based in ascending score
/// order; `q_l`/`q_u` are the sampled quantiles for band policies and
/// `lower/N`, `upper/N` otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub reward: f64,
    pub token_ratio: f64,
    pub passage_ratio: f64,
    pub lower: usize,
    pub upper: usize,
    pub q_l: f64,
    pub q_u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub label: String,
    pub n_instances: usize,
    pub mean_score: f64,
    pub mean_token_ratio: f64,
    pub mean_passage_ratio: f64,
    pub rows: Vec<EvalRow>,
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.fold(0.0, |a, v| a + v) / n as f64
}

impl EvalReport {
    /// Means are arithmetic means over rows, token ratio included.
    pub fn from_rows(label: impl Into<String>, rows: Vec<EvalRow>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::usage("evaluation over an empty dataset"));
        }
        Ok(EvalReport {
            label: label.into(),
            n_instances: n,
            mean_score: mean(rows.iter().map(|r| r.reward), n),
            mean_token_ratio: mean(rows.iter().map(|r| r.token_ratio), n),
            mean_passage_ratio: mean(rows.iter().map(|r| r.passage_ratio), n),
            rows,
        })
    }

    /// Mean `q_U − q_L`.
    pub fn mean_band_width(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.q_u - r.q_l), self.n_instances)
    }
}

/// What to evaluate.
#[derive(Debug, Clone, Copy)]
pub enum Evaluated<'a> {
    Fixed(&'a StrategySpec),
    Policy(&'a PolicyParams),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub seed: u64,
    /// Band policies act at the Beta means, Bernoulli at `p > 1/2`.
    pub greedy: bool,
    /// Instances per forward pass.
    pub chunk: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { seed: 0, greedy: false, chunk: 32 }
    }
}

struct Pending {
    selection: Vec<usize>,
    lower: usize,
    upper: usize,
    q_l: f64,
    q_u: f64,
}

/// Sorted one-based extent of a selection.
pub fn band_extent(scores: &[f64], selection: &[usize]) -> (usize, usize) {
    if selection.is_empty() {
        return (0, 0);
    }
    let order = rank_order(scores);
    let mut pos = alloc::vec![0; scores.len()];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p + 1;
    }
    let lo = selection.iter().map(|&i| pos[i]).min().unwrap_or(0);
    let hi = selection.iter().map(|&i| pos[i]).max().unwrap_or(0);
    (lo, hi)
}

fn decide_chunk(what: Evaluated<'_>, chunk: &[Instance], rngs: &mut [Rng], greedy: bool) -> Result<Vec<Pending>> {
    match what {
        Evaluated::Fixed(spec) => chunk
            .iter()
            .map(|inst| {
                let selection = spec.select_fixed(&inst.scores)?;
                let (lower, upper) = band_extent(&inst.scores, &selection);
                let n = inst.n() as f64;
                Ok(Pending { selection, lower, upper, q_l: lower as f64 / n, q_u: upper as f64 / n })
            })
            .collect(),
        Evaluated::Policy(params) => {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let batch: Vec<&[f64]> = chunk.iter().map(|i| i.scores.as_slice()).collect();
            match params.config().head {
                HeadKind::Band => {
                    let fwd = band_forward(&mut tape, params, &bound, &batch)?;
                    let mut out = Vec::with_capacity(chunk.len());
                    for (j, rng) in rngs.iter_mut().enumerate() {
                        let bp = &fwd.params[j];
                        let action =
                            if greedy { bp.mean_action()? } else { sample_band(bp, params.config().sample_clamp, rng)? };
                        let n = batch[j].len();
                        let (lower, upper) = quantiles_to_indices(n, action.q_l, action.q_u)?;
                        let selection = fwd.orders[j][lower - 1..upper].to_vec();
                        out.push(Pending { selection, lower, upper, q_l: action.q_l, q_u: action.q_u });
                    }
                    Ok(out)
                }
                HeadKind::Bernoulli => {
                    let fwd = token_logits(&mut tape, params, &bound, &batch)?;
                    let decisions = bernoulli_decisions(&tape, fwd.logits, &fwd.orders, &fwd.segments, greedy, rngs);
                    Ok(decisions
                        .into_iter()
                        .zip(chunk)
                        .map(|(d, inst)| {
                            let (lower, upper) = band_extent(&inst.scores, &d.selection);
                            let n = inst.n() as f64;
                            Pending { selection: d.selection, lower, upper, q_l: lower as f64 / n, q_u: upper as f64 / n }
                        })
                        .collect())
                }
            }
        }
    }
}

/// Evaluates `what` on every instance once. Instance `i` draws from stream
/// `i` under `opts.seed`, so results do not depend on `opts.chunk`.
pub fn evaluate(
    label: &str,
    what: Evaluated<'_>,
    instances: &[Instance],
    opts: &EvalOptions,
    mut oracle: Option<&mut dyn AnswerOracle>,
) -> Result<EvalReport> {
    if opts.chunk == 0 {
        return Err(Error::usage("evaluation chunk size must be positive"));
    }
    let mut rows = Vec::with_capacity(instances.len());
    for (c, chunk) in instances.chunks(opts.chunk).enumerate() {
        let base = c * opts.chunk;
        let mut rngs: Vec<Rng> = (0..chunk.len()).map(|j| rng::stream(opts.seed, (base + j) as u64)).collect();
        let pending = decide_chunk(what, chunk, &mut rngs, opts.greedy)?;
        let pairs: Vec<(&Instance, &[usize])> = chunk.iter().zip(&pending).map(|(i, p)| (i, p.selection.as_slice())).collect();
        let rewards = environ::rewards(&pairs, &mut rngs, environ::reborrow(&mut oracle))?;
        for ((inst, p), reward) in chunk.iter().zip(&pending).zip(rewards) {
            rows.push(EvalRow {
                id: inst.id.clone(),
                reward,
                token_ratio: environ::token_ratio(inst, &p.selection)?,
                passage_ratio: environ::passage_ratio(inst, &p.selection)?,
                lower: p.lower,
                upper: p.upper,
                q_l: p.q_l,
                q_u: p.q_u,
            });
        }
    }
    EvalReport::from_rows(label, rows)
}
