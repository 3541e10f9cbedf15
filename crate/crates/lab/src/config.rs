//! Flat run configuration and serde mirrors of the core config types.

use std::path::Path;

use ldar_core::environ::{GeneratorConfig, RewardKind};
use ldar_core::policy::{HeadKind, PolicyConfig};
use ldar_core::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyDoc {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_frequencies: usize,
    pub param_floor: f64,
    pub sample_clamp: f64,
    pub head: String,
}

impl From<&PolicyConfig> for PolicyDoc {
    fn from(c: &PolicyConfig) -> Self {
        PolicyDoc {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            ffn_dim: c.ffn_dim,
            n_frequencies: c.n_frequencies,
            param_floor: c.param_floor,
            sample_clamp: c.sample_clamp,
            head: c.head.as_str().to_string(),
        }
    }
}

impl PolicyDoc {
    pub fn to_config(&self) -> ldar_core::Result<PolicyConfig> {
        let c = PolicyConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            n_frequencies: self.n_frequencies,
            param_floor: self.param_floor,
            sample_clamp: self.sample_clamp,
            head: HeadKind::parse(&self.head)?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerDoc {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_coeff: f64,
    pub total_steps: u64,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub eval_every: u64,
}

impl From<&TrainerConfig> for TrainerDoc {
    fn from(c: &TrainerConfig) -> Self {
        TrainerDoc {
            batch_size: c.batch_size,
            learning_rate: c.learning_rate,
            adam_beta1: c.adam_beta1,
            adam_beta2: c.adam_beta2,
            adam_eps: c.adam_eps,
            ema_coeff: c.ema_coeff,
            total_steps: c.total_steps,
            grad_clip_norm: c.grad_clip_norm,
            seed: c.seed,
            eval_every: c.eval_every,
        }
    }
}

impl TrainerDoc {
    pub fn to_config(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_eps: self.adam_eps,
            ema_coeff: self.ema_coeff,
            total_steps: self.total_steps,
            grad_clip_norm: self.grad_clip_norm,
            seed: self.seed,
            eval_every: self.eval_every,
        }
    }
}

/// One flat document for `gen`, `train`, `eval` and `compare`. Keys are the
/// field names of the generator, policy and trainer configs; every key is
/// optional. `seed` seeds generation, training and evaluation alike.
/// Generator keys override every profile of the chosen preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,

    /// Environment preset: `default`, `heterogeneous` or `overload`.
    pub preset: Option<String>,
    pub n_instances: Option<usize>,
    pub n_passages: Option<usize>,
    pub gold_count: Option<[usize; 2]>,
    pub distractor_count: Option<[usize; 2]>,
    pub gold_band: Option<[f64; 2]>,
    pub distractor_band: Option<[f64; 2]>,
    pub background_band: Option<[f64; 2]>,
    pub distractor_weight: Option<[f64; 2]>,
    pub token_count: Option<[u32; 2]>,
    pub capacity: Option<[f64; 2]>,
    pub reward_kind: Option<String>,
    pub overload_limit: Option<usize>,
    pub flip_prob: Option<f64>,

    /// `default` (full width) or `desk` (d_model 64, 16 frequencies).
    pub policy_preset: Option<String>,
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub n_frequencies: Option<usize>,
    pub param_floor: Option<f64>,
    pub sample_clamp: Option<f64>,
    pub head: Option<String>,

    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub adam_eps: Option<f64>,
    pub ema_coeff: Option<f64>,
    pub total_steps: Option<u64>,
    pub grad_clip_norm: Option<f64>,
    pub eval_every: Option<u64>,

    /// Instances held out from training; defaults to a fifth of the data.
    pub held_out: Option<usize>,
    /// Evaluate learned policies at their distribution means.
    pub greedy: Option<bool>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::parse(&text).map_err(|detail| LabError::Config { path: path.to_path_buf(), detail })
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn generator(&self) -> Result<GeneratorConfig> {
        let mut g = GeneratorConfig::preset(self.preset.as_deref().unwrap_or("default"))?;
        set!(g.seed, self.seed);
        set!(g.n_instances, self.n_instances);
        set!(g.n_passages, self.n_passages);
        let kind = self.reward_kind.as_deref().map(RewardKind::parse).transpose()?;
        for (_, p) in &mut g.profiles {
            set!(p.gold_count, self.gold_count.map(|[a, b]| (a, b)));
            set!(p.distractor_count, self.distractor_count.map(|[a, b]| (a, b)));
            set!(p.gold_band, self.gold_band.map(|[a, b]| (a, b)));
            set!(p.distractor_band, self.distractor_band.map(|[a, b]| (a, b)));
            set!(p.background_band, self.background_band.map(|[a, b]| (a, b)));
            set!(p.distractor_weight, self.distractor_weight.map(|[a, b]| (a, b)));
            set!(p.token_count, self.token_count.map(|[a, b]| (a, b)));
            set!(p.capacity, self.capacity.map(|[a, b]| (a, b)));
            set!(p.reward_kind, kind);
            set!(p.overload_limit, self.overload_limit);
            set!(p.flip_prob, self.flip_prob);
        }
        g.validate()?;
        Ok(g)
    }

    pub fn policy(&self) -> Result<PolicyConfig> {
        let mut c = match self.policy_preset.as_deref().unwrap_or("default") {
            "default" => PolicyConfig::default(),
            "desk" => PolicyConfig::desk(),
            other => return Err(LabError::usage(format!("unknown policy preset {other:?}"))),
        };
        if let Some(d) = self.d_model {
            c.d_model = d;
            if self.ffn_dim.is_none() {
                c.ffn_dim = 4 * d;
            }
        }
        set!(c.n_layers, self.n_layers);
        set!(c.n_heads, self.n_heads);
        set!(c.ffn_dim, self.ffn_dim);
        set!(c.n_frequencies, self.n_frequencies);
        set!(c.param_floor, self.param_floor);
        set!(c.sample_clamp, self.sample_clamp);
        if let Some(h) = &self.head {
            c.head = HeadKind::parse(h)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn trainer(&self) -> Result<TrainerConfig> {
        let mut c = TrainerConfig::default();
        set!(c.seed, self.seed);
        set!(c.batch_size, self.batch_size);
        set!(c.learning_rate, self.learning_rate);
        set!(c.adam_beta1, self.adam_beta1);
        set!(c.adam_beta2, self.adam_beta2);
        set!(c.adam_eps, self.adam_eps);
        set!(c.ema_coeff, self.ema_coeff);
        set!(c.total_steps, self.total_steps);
        set!(c.grad_clip_norm, self.grad_clip_norm);
        set!(c.eval_every, self.eval_every);
        c.validate()?;
        Ok(c)
    }

    pub fn held_out_for(&self, n: usize) -> usize {
        self.held_out.unwrap_or(n / 5)
    }
}
