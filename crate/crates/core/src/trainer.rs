//! REINFORCE with an EMA baseline, global-norm clipping and Adam.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

use crate::diffcore::{special, Tape, Var};
use crate::environ::{self, AnswerOracle, Instance};
use crate::error::{Error, Result};
use crate::policy::{
    band_forward, band_log_prob, quantiles_to_indices, sample_band, token_logits, BoundParams, HeadKind, PolicyConfig,
    PolicyParams,
};
use crate::rng::{self, Rng, RngState};
use crate::strategies::{bernoulli_decisions, bernoulli_log_prob};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Weight of the old baseline: `b′ = c·b + (1 − c)·mean(r)`.
    pub ema_coeff: f64,
    pub total_steps: u64,
    /// Global gradient norm cap; `f64::INFINITY` disables clipping.
    pub grad_clip_norm: f64,
    pub seed: u64,
    /// Held-out evaluation and checkpoint period; 0 means only at the end.
    pub eval_every: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            batch_size: 32,
            learning_rate: 3e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_coeff: 0.5,
            total_steps: 2000,
            grad_clip_norm: 5.0,
            seed: 0,
            eval_every: 500,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_coeff) {
            return bad("ema_coeff must lie in [0, 1]");
        }
        if self.total_steps == 0 {
            return bad("total_steps must be at least 1");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("grad_clip_norm must be positive");
        }
        Ok(())
    }
}

/// Optimizer moments, the step counter and the reward baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub baseline: f64,
}

impl TrainerState {
    pub fn new(params: &PolicyParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        TrainerState { step: 0, m: zeros.clone(), v: zeros, baseline: 0.0 }
    }

    pub fn check_matches(&self, params: &PolicyParams) -> Result<()> {
        let ok = self.m.len() == params.len()
            && self.v.len() == params.len()
            && params.iter().zip(self.m.iter().zip(&self.v)).all(|((_, t), (m, v))| m.len() == t.numel() && v.len() == t.numel());
        if !ok {
            return Err(Error::dim("trainer state", "optimizer moments do not mirror the parameters"));
        }
        Ok(())
    }
}

/// One row of the metrics stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_reward: f64,
    /// Baseline after this step's update.
    pub baseline: f64,
    pub loss: f64,
    pub mean_q_l: f64,
    pub mean_q_u: f64,
    pub passage_ratio: f64,
    pub token_ratio: f64,
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let sq = grads.iter().flatten().fold(0.0, |a, g| a + g * g);
    let norm = special::sqrt(sq);
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g *= scale;
        }
    }
    norm
}

/// Bias-corrected Adam, `θ ← θ − γ·m̂/(√v̂ + ε)`. Advances `state.step`.
pub fn adam_step(params: &mut PolicyParams, grads: &[Vec<f64>], state: &mut TrainerState, cfg: &TrainerConfig) -> Result<()> {
    state.check_matches(params)?;
    if grads.len() != params.len() {
        return Err(Error::dim("adam_step", format!("{} gradients for {} parameters", grads.len(), params.len())));
    }
    let t = (state.step + 1) as f64;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - special::powf(b1, t);
    let c2 = 1.0 - special::powf(b2, t);
    for (i, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let theta = params.tensor_mut(i).data_mut();
        if g.len() != theta.len() {
            return Err(Error::dim("adam_step", format!("gradient {i} has {} entries for {}", g.len(), theta.len())));
        }
        for j in 0..g.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            theta[j] -= cfg.learning_rate * m_hat / (special::sqrt(v_hat) + cfg.adam_eps);
        }
    }
    state.step += 1;
    Ok(())
}

struct Rollout {
    log_probs: Var,
    selections: Vec<Vec<usize>>,
    q_l: Vec<f64>,
    q_u: Vec<f64>,
}

fn rollout_band(
    tape: &mut Tape,
    params: &PolicyParams,
    bound: &BoundParams,
    batch: &[&Instance],
    rngs: &mut [Rng],
    step: u64,
) -> Result<Rollout> {
    let scores: Vec<&[f64]> = batch.iter().map(|i| i.scores.as_slice()).collect();
    let fwd = band_forward(tape, params, bound, &scores)?;
    if let Some(j) = fwd.params.iter().position(|p| !p.as_array().iter().all(|v| v.is_finite())) {
        return Err(Error::NonFinite { step, instance_id: batch[j].id.clone() });
    }
    let mut actions = Vec::with_capacity(batch.len());
    let mut selections = Vec::with_capacity(batch.len());
    for (j, rng) in rngs.iter_mut().enumerate() {
        let a = sample_band(&fwd.params[j], params.config().sample_clamp, rng)?;
        let (lower, upper) = quantiles_to_indices(batch[j].n(), a.q_l, a.q_u)?;
        selections.push(fwd.orders[j][lower - 1..upper].to_vec());
        actions.push(a);
    }
    let log_probs = band_log_prob(tape, &fwd.heads, &actions)?;
    Ok(Rollout {
        log_probs,
        selections,
        q_l: actions.iter().map(|a| a.q_l).collect(),
        q_u: actions.iter().map(|a| a.q_u).collect(),
    })
}

fn rollout_bernoulli(
    tape: &mut Tape,
    params: &PolicyParams,
    bound: &BoundParams,
    batch: &[&Instance],
    rngs: &mut [Rng],
    step: u64,
) -> Result<Rollout> {
    let scores: Vec<&[f64]> = batch.iter().map(|i| i.scores.as_slice()).collect();
    let fwd = token_logits(tape, params, bound, &scores)?;
    for (j, (start, len)) in fwd.segments.iter().enumerate() {
        if tape.value(fwd.logits)[start..start + len].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step, instance_id: batch[j].id.clone() });
        }
    }
    let decisions = bernoulli_decisions(tape, fwd.logits, &fwd.orders, &fwd.segments, false, rngs);
    let masks: Vec<Vec<bool>> = decisions.iter().map(|d| d.mask.clone()).collect();
    let log_probs = bernoulli_log_prob(tape, fwd.logits, &fwd.segments, &masks)?;
    let extent = |mask: &[bool], first: bool| {
        let n = mask.len() as f64;
        let pos = if first { mask.iter().position(|&m| m) } else { mask.iter().rposition(|&m| m) };
        pos.map_or(0.0, |p| (p + 1) as f64 / n)
    };
    Ok(Rollout {
        log_probs,
        q_l: masks.iter().map(|m| extent(m, true)).collect(),
        q_u: masks.iter().map(|m| extent(m, false)).collect(),
        selections: decisions.into_iter().map(|d| d.selection).collect(),
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a, x| a + x) / v.len() as f64
}

/// One policy-gradient update on `batch`. Each item draws its action (and
/// any reward flip) from a stream seeded off `rng`.
pub fn reinforce_step(
    params: &mut PolicyParams,
    state: &mut TrainerState,
    batch: &[&Instance],
    cfg: &TrainerConfig,
    rng: &mut Rng,
    oracle: Option<&mut dyn AnswerOracle>,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::usage("empty training batch"));
    }
    let step = state.step;
    let mut rngs: Vec<Rng> = (0..batch.len()).map(|_| Rng::seed_from_u64(rng.random::<u64>())).collect();

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let roll = match params.config().head {
        HeadKind::Band => rollout_band(&mut tape, params, &bound, batch, &mut rngs, step)?,
        HeadKind::Bernoulli => rollout_bernoulli(&mut tape, params, &bound, batch, &mut rngs, step)?,
    };
    let pairs: Vec<(&Instance, &[usize])> = batch.iter().zip(&roll.selections).map(|(i, s)| (*i, s.as_slice())).collect();
    let rewards = environ::rewards(&pairs, &mut rngs, oracle)?;

    let lp = tape.value(roll.log_probs).to_vec();
    if let Some(j) = lp.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step, instance_id: batch[j].id.clone() });
    }
    let b = state.baseline;
    let inv_b = 1.0 / batch.len() as f64;
    let coef: Vec<f64> = rewards.iter().map(|r| -(r - b) * inv_b).collect();
    let weighted = tape.mul_const(roll.log_probs, coef)?;
    let loss = tape.sum(weighted);
    let loss_value = tape.scalar(loss);
    if !loss_value.is_finite() {
        return Err(Error::NonFinite { step, instance_id: batch[0].id.clone() });
    }

    let g = tape.backward(loss)?;
    let mut grads: Vec<Vec<f64>> = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let t = g.of(bound.var(i)).ok_or_else(|| Error::usage("parameter missing from gradient"))?;
        grads.push(t.data().to_vec());
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { step, instance_id: batch[0].id.clone() });
    }
    clip_global_norm(&mut grads, cfg.grad_clip_norm);
    adam_step(params, &grads, state, cfg)?;

    let mean_reward = mean(&rewards);
    state.baseline = cfg.ema_coeff * b + (1.0 - cfg.ema_coeff) * mean_reward;

    let mut token = 0.0;
    let mut passage = 0.0;
    for (inst, sel) in &pairs {
        token += environ::token_ratio(inst, sel)?;
        passage += environ::passage_ratio(inst, sel)?;
    }
    Ok(StepMetrics {
        step: state.step,
        mean_reward,
        baseline: state.baseline,
        loss: loss_value,
        mean_q_l: mean(&roll.q_l),
        mean_q_u: mean(&roll.q_u),
        passage_ratio: passage * inv_b,
        token_ratio: token * inv_b,
    })
}

/// Parameters, optimizer state and the rollout stream of one run.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub params: PolicyParams,
    pub state: TrainerState,
    pub config: TrainerConfig,
    rng: Rng,
}

const INIT_STREAM: u64 = 0;
const ROLLOUT_STREAM: u64 = 1;
const SHUFFLE_STREAM_BASE: u64 = 1 << 32;

impl Trainer {
    /// Fresh run: parameters from stream 0 of the seed, rollouts from
    /// stream 1, the epoch-`e` shuffle from stream `2^32 + e`.
    pub fn new(policy: PolicyConfig, config: TrainerConfig) -> Result<Self> {
        config.validate()?;
        let params = PolicyParams::init(policy, &mut rng::stream(config.seed, INIT_STREAM))?;
        let state = TrainerState::new(&params);
        let rng = rng::stream(config.seed, ROLLOUT_STREAM);
        Ok(Trainer { params, state, config, rng })
    }

    pub fn from_parts(params: PolicyParams, state: TrainerState, config: TrainerConfig, rng: RngState) -> Result<Self> {
        config.validate()?;
        state.check_matches(&params)?;
        Ok(Trainer { params, state, config, rng: rng.restore() })
    }

    pub fn rng_state(&self) -> RngState {
        RngState::capture(&self.rng)
    }

    /// Training indices for step `step`: consecutive slices of per-epoch
    /// permutations, so the schedule needs no state beyond the step.
    pub fn batch_indices(&self, n_train: usize, step: u64) -> Vec<usize> {
        let b = self.config.batch_size;
        let mut out = Vec::with_capacity(b);
        let mut cached: Option<(u64, Vec<usize>)> = None;
        for j in 0..b as u64 {
            let pos = step * b as u64 + j;
            let epoch = pos / n_train as u64;
            let offset = (pos % n_train as u64) as usize;
            if cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n_train).collect();
                perm.shuffle(&mut rng::stream(self.config.seed, SHUFFLE_STREAM_BASE + epoch));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().unwrap().1[offset]);
        }
        out
    }

    pub fn step(&mut self, train: &[Instance], oracle: Option<&mut dyn AnswerOracle>) -> Result<StepMetrics> {
        if train.is_empty() {
            return Err(Error::usage("empty training set"));
        }
        let idx = self.batch_indices(train.len(), self.state.step);
        let batch: Vec<&Instance> = idx.iter().map(|&i| &train[i]).collect();
        reinforce_step(&mut self.params, &mut self.state, &batch, &self.config, &mut self.rng, oracle)
    }

    /// Steps until `total_steps`, handing every metrics row to `on_step`.
    pub fn run<F>(&mut self, train: &[Instance], mut oracle: Option<&mut dyn AnswerOracle>, mut on_step: F) -> Result<()>
    where
        F: FnMut(&Trainer, &StepMetrics) -> Result<()>,
    {
        while self.state.step < self.config.total_steps {
            let m = self.step(train, environ::reborrow(&mut oracle))?;
            on_step(self, &m)?;
        }
        Ok(())
    }
}
