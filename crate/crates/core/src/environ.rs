//! Retrieval instances, the cosine scorer, the synthetic distraction
//! environment, rewards and token accounting.
//!
//! A synthetic instance has three kinds of passage: gold passages that the
//! answer needs, distractors that carry a positive weight, and background
//! passages that are harmless. The simulated answering model is correct when
//! every gold passage is in context and the distractor weight in context
//! stays within its capacity `C`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::diffcore::special;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RewardKind {
    Capacity,
    CapacityOverload,
    External,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RewardKind::Capacity => "capacity",
            RewardKind::CapacityOverload => "capacity_overload",
            RewardKind::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "capacity" => Ok(RewardKind::Capacity),
            "capacity_overload" => Ok(RewardKind::CapacityOverload),
            "external" => Ok(RewardKind::External),
            other => Err(Error::data(format!("unknown reward kind {other:?}"))),
        }
    }
}

/// How a selection is judged.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardModel {
    pub kind: RewardKind,
    /// Tolerated distractor weight `C`.
    pub capacity: f64,
    /// Largest selection the overload kind accepts.
    pub overload_limit: usize,
    /// Probability that a synthetic judgement is inverted.
    pub flip_prob: f64,
}

impl RewardModel {
    pub fn capacity(capacity: f64) -> Self {
        RewardModel { kind: RewardKind::Capacity, capacity, overload_limit: usize::MAX, flip_prob: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.capacity >= 0.0) || !self.capacity.is_finite() {
            return Err(Error::data(format!("capacity {} must be a non-negative real", self.capacity)));
        }
        if self.overload_limit == 0 {
            return Err(Error::data("overload limit must be positive"));
        }
        if !(0.0..0.5).contains(&self.flip_prob) {
            return Err(Error::data(format!("flip probability {} outside [0, 0.5)", self.flip_prob)));
        }
        Ok(())
    }
}

/// One query with its candidate pool, reduced to what selection needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: String,
    pub scores: Vec<f64>,
    pub token_counts: Vec<u32>,
    pub gold: Vec<usize>,
    pub distractor_weights: Vec<f64>,
    pub reward_model: RewardModel,
}

impl Instance {
    pub fn n(&self) -> usize {
        self.scores.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.scores.len();
        if n == 0 {
            return Err(Error::data(format!("{}: no passages", self.id)));
        }
        if self.token_counts.len() != n || self.distractor_weights.len() != n {
            return Err(Error::data(format!(
                "{}: {n} scores but {} token counts and {} weights",
                self.id,
                self.token_counts.len(),
                self.distractor_weights.len()
            )));
        }
        if let Some(s) = self.scores.iter().find(|s| !(-1.0..=1.0).contains(*s)) {
            return Err(Error::data(format!("{}: score {s} outside [-1, 1]", self.id)));
        }
        if self.token_counts.contains(&0) {
            return Err(Error::data(format!("{}: token counts must be positive", self.id)));
        }
        if let Some(w) = self.distractor_weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::data(format!("{}: distractor weight {w} is negative", self.id)));
        }
        if let Some(g) = self.gold.iter().find(|&&g| g >= n) {
            return Err(Error::data(format!("{}: gold index {g} out of range for {n} passages", self.id)));
        }
        self.reward_model.validate().map_err(|e| Error::data(format!("{}: {e}", self.id)))
    }
}

/// `s_i = q·p_i / (‖q‖ ‖p_i‖)`.
pub fn cosine_scores(query: &[f64], passages: &[Vec<f64>]) -> Result<Vec<f64>> {
    let norm = |v: &[f64]| special::sqrt(v.iter().fold(0.0, |a, x| a + x * x));
    let qn = norm(query);
    if qn == 0.0 {
        return Err(Error::Domain { op: "cosine_scores", value: 0.0 });
    }
    passages
        .iter()
        .map(|p| {
            if p.len() != query.len() {
                return Err(Error::dim("cosine_scores", format!("query dim {} vs passage dim {}", query.len(), p.len())));
            }
            let pn = norm(p);
            if pn == 0.0 {
                return Err(Error::Domain { op: "cosine_scores", value: 0.0 });
            }
            let dot = query.iter().zip(p).fold(0.0, |a, (x, y)| a + x * y);
            Ok((dot / (qn * pn)).clamp(-1.0, 1.0))
        })
        .collect()
}

/// An external judge of answer correctness.
pub trait AnswerOracle {
    fn judge(&mut self, inst: &Instance, selection: &[usize]) -> Result<bool>;

    /// Judges several selections; implementations may overlap requests.
    fn judge_batch(&mut self, queries: &[(&Instance, &[usize])]) -> Result<Vec<bool>> {
        queries.iter().map(|(inst, sel)| self.judge(inst, sel)).collect()
    }
}

/// Shortens the borrow of an optional oracle for one call in a loop.
pub fn reborrow<'a>(oracle: &'a mut Option<&mut dyn AnswerOracle>) -> Option<&'a mut dyn AnswerOracle> {
    match oracle {
        Some(o) => Some(&mut **o),
        None => None,
    }
}

fn selection_mask(inst: &Instance, selection: &[usize]) -> Result<Vec<bool>> {
    let n = inst.n();
    let mut mask = vec![false; n];
    for &i in selection {
        if i >= n {
            return Err(Error::usage(format!("{}: selected index {i} out of range for {n} passages", inst.id)));
        }
        mask[i] = true;
    }
    Ok(mask)
}

/// The noiseless synthetic rule for the capacity kinds.
pub fn synthetic_correct(inst: &Instance, selection: &[usize]) -> Result<bool> {
    let mask = selection_mask(inst, selection)?;
    let model = &inst.reward_model;
    if model.kind == RewardKind::External {
        return Err(Error::usage("external rewards need an answer oracle"));
    }
    let gold_in = inst.gold.iter().all(|&g| mask[g]);
    let load = inst.distractor_weights.iter().zip(&mask).filter(|(_, &m)| m).fold(0.0, |a, (w, _)| a + w);
    let mut ok = gold_in && load <= model.capacity;
    if model.kind == RewardKind::CapacityOverload {
        ok &= mask.iter().filter(|&&m| m).count() <= model.overload_limit;
    }
    Ok(ok)
}

fn maybe_flip(correct: bool, flip_prob: f64, rng: &mut Rng) -> bool {
    if flip_prob > 0.0 && rng.random::<f64>() < flip_prob {
        !correct
    } else {
        correct
    }
}

fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// Reward in `{0, 1}`. The RNG is only consumed when `flip_prob > 0`.
pub fn reward(inst: &Instance, selection: &[usize], rng: &mut Rng, oracle: Option<&mut dyn AnswerOracle>) -> Result<f64> {
    match inst.reward_model.kind {
        RewardKind::External => {
            selection_mask(inst, selection)?;
            let oracle = oracle.ok_or_else(|| Error::usage("external rewards need an answer oracle"))?;
            Ok(indicator(oracle.judge(inst, selection)?))
        }
        _ => {
            let ok = synthetic_correct(inst, selection)?;
            Ok(indicator(maybe_flip(ok, inst.reward_model.flip_prob, rng)))
        }
    }
}

/// Rewards for a batch; synthetic instances draw flips from their own RNG in
/// order, external ones go to the oracle in one batch.
pub fn rewards<'a>(
    batch: &[(&'a Instance, &'a [usize])],
    rngs: &mut [Rng],
    oracle: Option<&mut dyn AnswerOracle>,
) -> Result<Vec<f64>> {
    if rngs.len() != batch.len() {
        return Err(Error::usage(format!("{} RNG streams for {} instances", rngs.len(), batch.len())));
    }
    let mut out = vec![0.0; batch.len()];
    let mut external = Vec::new();
    for (i, (inst, sel)) in batch.iter().enumerate() {
        if inst.reward_model.kind == RewardKind::External {
            selection_mask(inst, sel)?;
            external.push(i);
        } else {
            out[i] = reward(inst, sel, &mut rngs[i], None)?;
        }
    }
    if !external.is_empty() {
        let oracle = oracle.ok_or_else(|| Error::usage("external rewards need an answer oracle"))?;
        let queries: Vec<(&Instance, &[usize])> = external.iter().map(|&i| batch[i]).collect();
        let verdicts = oracle.judge_batch(&queries)?;
        if verdicts.len() != queries.len() {
            return Err(Error::Protocol(format!("{} verdicts for {} queries", verdicts.len(), queries.len())));
        }
        for (&i, v) in external.iter().zip(verdicts) {
            out[i] = indicator(v);
        }
    }
    Ok(out)
}

/// Tokens of the selection over tokens of the whole pool.
pub fn token_ratio(inst: &Instance, selection: &[usize]) -> Result<f64> {
    let mask = selection_mask(inst, selection)?;
    let total: u64 = inst.token_counts.iter().map(|&t| t as u64).sum();
    let used: u64 = inst.token_counts.iter().zip(&mask).filter(|(_, &m)| m).map(|(&t, _)| t as u64).sum();
    Ok(used as f64 / total as f64)
}

/// Fraction of the pool selected.
pub fn passage_ratio(inst: &Instance, selection: &[usize]) -> Result<f64> {
    let mask = selection_mask(inst, selection)?;
    Ok(mask.iter().filter(|&&m| m).count() as f64 / inst.n() as f64)
}

/// Per-instance distribution of a synthetic environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub gold_count: (usize, usize),
    pub distractor_count: (usize, usize),
    pub gold_band: (f64, f64),
    pub distractor_band: (f64, f64),
    pub background_band: (f64, f64),
    pub distractor_weight: (f64, f64),
    pub token_count: (u32, u32),
    /// Capacity drawn per instance; equal ends fix it.
    pub capacity: (f64, f64),
    pub reward_kind: RewardKind,
    pub overload_limit: usize,
    pub flip_prob: f64,
}

impl Default for Profile {
    fn default() -> Self {
        Profile {
            gold_count: (1, 3),
            distractor_count: (4, 10),
            gold_band: (0.60, 0.90),
            distractor_band: (0.55, 0.85),
            background_band: (0.00, 0.50),
            distractor_weight: (0.5, 1.5),
            token_count: (400, 800),
            capacity: (3.0, 6.0),
            reward_kind: RewardKind::Capacity,
            overload_limit: usize::MAX,
            flip_prob: 0.0,
        }
    }
}

impl Profile {
    fn validate(&self, n: usize) -> Result<()> {
        let int_range = |name: &str, (lo, hi): (usize, usize)| {
            if lo > hi {
                return Err(Error::config(format!("{name} range ({lo}, {hi}) is empty")));
            }
            Ok(())
        };
        let real_range = |name: &str, (lo, hi): (f64, f64), min: f64, max: f64| {
            if !(lo <= hi && lo >= min && hi <= max) {
                return Err(Error::config(format!("{name} range ({lo}, {hi}) invalid")));
            }
            Ok(())
        };
        int_range("gold_count", self.gold_count)?;
        int_range("distractor_count", self.distractor_count)?;
        if self.gold_count.0 == 0 {
            return Err(Error::config("gold_count must be at least 1"));
        }
        if self.gold_count.1 + self.distractor_count.1 > n {
            return Err(Error::config(format!(
                "up to {} gold and {} distractors do not fit in {n} passages",
                self.gold_count.1, self.distractor_count.1
            )));
        }
        real_range("gold_band", self.gold_band, -1.0, 1.0)?;
        real_range("distractor_band", self.distractor_band, -1.0, 1.0)?;
        real_range("background_band", self.background_band, -1.0, 1.0)?;
        real_range("distractor_weight", self.distractor_weight, f64::MIN_POSITIVE, f64::MAX)?;
        real_range("capacity", self.capacity, 0.0, f64::MAX)?;
        if self.token_count.0 == 0 || self.token_count.0 > self.token_count.1 {
            return Err(Error::config(format!("token_count range {:?} invalid", self.token_count)));
        }
        if self.reward_kind == RewardKind::External && self.flip_prob != 0.0 {
            return Err(Error::config("flip_prob applies to synthetic rewards only"));
        }
        RewardModel {
            kind: self.reward_kind,
            capacity: self.capacity.0,
            overload_limit: self.overload_limit,
            flip_prob: self.flip_prob,
        }
        .validate()
        .map_err(|e| Error::config(e.to_string()))
    }
}

/// Synthetic dataset recipe: `n_instances` pools of `n_passages`, each drawn
/// from one of the weighted profiles.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n_instances: usize,
    pub n_passages: usize,
    pub seed: u64,
    pub profiles: Vec<(f64, Profile)>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { n_instances: 500, n_passages: 52, seed: 0, profiles: vec![(1.0, Profile::default())] }
    }
}

impl GeneratorConfig {
    /// The default capacity environment with one fixed capacity.
    pub fn fixed_capacity(capacity: f64) -> Self {
        let profile = Profile { capacity: (capacity, capacity), ..Profile::default() };
        GeneratorConfig { profiles: vec![(1.0, profile)], ..Self::default() }
    }

    /// Two equally likely profiles that want different bands. In "head"
    /// pools the single gold passage ranks first and the pool tolerates a
    /// distractor or two; in "tail" pools the highest-similarity passages
    /// are heavy distractors and the gold sits in the middle of the ranking,
    /// so every top-k prefix fails there.
    pub fn heterogeneous() -> Self {
        let head = Profile {
            gold_count: (1, 1),
            distractor_count: (4, 8),
            gold_band: (0.88, 0.96),
            distractor_band: (0.55, 0.82),
            background_band: (0.00, 0.50),
            capacity: (1.5, 3.0),
            ..Profile::default()
        };
        let tail = Profile {
            gold_count: (1, 3),
            distractor_count: (2, 3),
            gold_band: (0.30, 0.60),
            distractor_band: (0.86, 0.96),
            background_band: (0.00, 0.80),
            distractor_weight: (1.0, 1.5),
            capacity: (0.0, 0.4),
            ..Profile::default()
        };
        GeneratorConfig { n_passages: 32, profiles: vec![(0.5, head), (0.5, tail)], ..Self::default() }
    }

    /// Named presets: `default`, `heterogeneous`, `overload`.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" | "capacity" => Ok(Self::default()),
            "heterogeneous" => Ok(Self::heterogeneous()),
            "overload" => {
                let profile = Profile {
                    reward_kind: RewardKind::CapacityOverload,
                    overload_limit: 12,
                    capacity: (4.0, 8.0),
                    ..Profile::default()
                };
                Ok(GeneratorConfig { profiles: vec![(1.0, profile)], ..Self::default() })
            }
            other => Err(Error::config(format!("unknown environment preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_passages == 0 {
            return Err(Error::config("n_passages must be positive"));
        }
        if self.profiles.is_empty() {
            return Err(Error::config("at least one profile is required"));
        }
        for (w, p) in &self.profiles {
            if !(*w > 0.0) || !w.is_finite() {
                return Err(Error::config(format!("profile weight {w} must be positive")));
            }
            p.validate(self.n_passages)?;
        }
        Ok(())
    }
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn pick_profile<'a>(profiles: &'a [(f64, Profile)], rng: &mut Rng) -> &'a Profile {
    if profiles.len() == 1 {
        return &profiles[0].1;
    }
    let total: f64 = profiles.iter().map(|(w, _)| w).sum();
    let mut u = rng.random::<f64>() * total;
    for (w, p) in profiles {
        if u < *w {
            return p;
        }
        u -= w;
    }
    &profiles[profiles.len() - 1].1
}

/// Draws one instance from its own RNG stream, so instance `i` does not
/// depend on how many instances are generated.
pub fn generate_instance(cfg: &GeneratorConfig, index: usize) -> Instance {
    let mut r = rng::stream(cfg.seed, index as u64);
    let n = cfg.n_passages;
    let p = pick_profile(&cfg.profiles, &mut r);
    let g = r.random_range(p.gold_count.0..=p.gold_count.1);
    let d = r.random_range(p.distractor_count.0..=p.distractor_count.1);
    let mut roles: Vec<usize> = (0..n).collect();
    roles.shuffle(&mut r);

    let mut scores = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let mut gold: Vec<usize> = roles[..g].to_vec();
    gold.sort_unstable();
    for (rank, &i) in roles.iter().enumerate() {
        if rank < g {
            scores[i] = uniform(&mut r, p.gold_band);
        } else if rank < g + d {
            scores[i] = uniform(&mut r, p.distractor_band);
            weights[i] = uniform(&mut r, p.distractor_weight);
        } else {
            scores[i] = uniform(&mut r, p.background_band);
        }
    }
    let token_counts = (0..n).map(|_| r.random_range(p.token_count.0..=p.token_count.1)).collect();
    let capacity = uniform(&mut r, p.capacity);
    Instance {
        id: format!("syn-{index:05}"),
        scores,
        token_counts,
        gold,
        distractor_weights: weights,
        reward_model: RewardModel {
            kind: p.reward_kind,
            capacity,
            overload_limit: p.overload_limit,
            flip_prob: p.flip_prob,
        },
    }
}

pub fn generate(cfg: &GeneratorConfig) -> Result<Vec<Instance>> {
    cfg.validate()?;
    Ok((0..cfg.n_instances).map(|i| generate_instance(cfg, i)).collect())
}

/// Splits off the last `held_out` instances.
pub fn split(mut instances: Vec<Instance>, held_out: usize) -> Result<(Vec<Instance>, Vec<Instance>)> {
    if held_out >= instances.len() {
        return Err(Error::config(format!("held-out size {held_out} leaves no training instances")));
    }
    let test = instances.split_off(instances.len() - held_out);
    Ok((instances, test))
}
