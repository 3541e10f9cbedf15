use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::config::{HeadKind, PolicyConfig};
use crate::diffcore::{special, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Index of a linear layer's weight (`fan_in × fan_out`) and bias.
#[derive(Debug, Clone, Copy)]
pub struct LinearIdx {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct NormIdx {
    pub gain: usize,
    pub bias: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockIdx {
    pub norm1: NormIdx,
    pub q: LinearIdx,
    pub k: LinearIdx,
    pub v: LinearIdx,
    pub o: LinearIdx,
    pub norm2: NormIdx,
    pub up: LinearIdx,
    pub down: LinearIdx,
}

#[derive(Debug, Clone)]
pub enum HeadIdx {
    Band { scorer: LinearIdx, mlp: LinearIdx, heads: [LinearIdx; 4] },
    Bernoulli { token: LinearIdx },
}

/// Positions of every named tensor, fixed by the config.
#[derive(Debug, Clone)]
pub struct Layout {
    pub freqs: usize,
    pub embed: LinearIdx,
    pub embed_norm: NormIdx,
    pub blocks: Vec<BlockIdx>,
    pub head: HeadIdx,
}

/// Names of the four Beta heads, in `(α_L, β_L, α_Δ, β_Δ)` order.
pub const BAND_HEADS: [&str; 4] = ["alpha_l", "beta_l", "alpha_delta", "beta_delta"];

enum Init {
    Uniform(f64),
    Normal,
    Const(f64),
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Builder {
    specs: Vec<Spec>,
}

impl Builder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(Spec { name, shape, init });
        self.specs.len() - 1
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, bias_init: Option<f64>) -> LinearIdx {
        let bound = 1.0 / special::sqrt(fan_in as f64);
        let weight = self.push(format!("{prefix}.weight"), vec![fan_in, fan_out], Init::Uniform(bound));
        let bias_init = bias_init.map_or(Init::Uniform(bound), Init::Const);
        let bias = self.push(format!("{prefix}.bias"), vec![fan_out], bias_init);
        LinearIdx { weight, bias }
    }

    fn norm(&mut self, prefix: &str, width: usize) -> NormIdx {
        let gain = self.push(format!("{prefix}.gain"), vec![width], Init::Const(1.0));
        let bias = self.push(format!("{prefix}.bias"), vec![width], Init::Const(0.0));
        NormIdx { gain, bias }
    }
}

fn plan(cfg: &PolicyConfig) -> (Layout, Vec<Spec>) {
    let d = cfg.d_model;
    let mut b = Builder { specs: Vec::new() };
    let freqs = b.push("embed.freqs".into(), vec![cfg.n_frequencies], Init::Normal);
    let embed = b.linear("embed.linear", 2 * cfg.n_frequencies, d, None);
    let embed_norm = b.norm("embed.norm", d);
    let blocks = (0..cfg.n_layers)
        .map(|l| BlockIdx {
            norm1: b.norm(&format!("encoder.{l}.norm1"), d),
            q: b.linear(&format!("encoder.{l}.attn.q"), d, d, None),
            k: b.linear(&format!("encoder.{l}.attn.k"), d, d, None),
            v: b.linear(&format!("encoder.{l}.attn.v"), d, d, None),
            o: b.linear(&format!("encoder.{l}.attn.o"), d, d, None),
            norm2: b.norm(&format!("encoder.{l}.norm2"), d),
            up: b.linear(&format!("encoder.{l}.ffn.up"), d, cfg.ffn_dim, None),
            down: b.linear(&format!("encoder.{l}.ffn.down"), cfg.ffn_dim, d, None),
        })
        .collect();
    let head = match cfg.head {
        HeadKind::Band => {
            let scorer = b.linear("pool.scorer", d, 1, None);
            let mlp = b.linear("pool.mlp", d, d, None);
            // Initial Beta parameters ≈ 1, i.e. an almost uniform band policy.
            let unit = special::softplus_inv(1.0);
            let heads = BAND_HEADS.map(|h| b.linear(&format!("head.{h}"), d, 1, Some(unit)));
            HeadIdx::Band { scorer, mlp, heads }
        }
        HeadKind::Bernoulli => HeadIdx::Bernoulli { token: b.linear("head.token", d, 1, Some(0.0)) },
    };
    (Layout { freqs, embed, embed_norm, blocks, head }, b.specs)
}

/// All learnable tensors of one policy network.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    config: PolicyConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout_cache: LayoutCache,
}

#[derive(Debug, Clone)]
struct LayoutCache(Layout);

impl PartialEq for LayoutCache {
    fn eq(&self, _: &Self) -> bool {
        true
    }
}

impl PolicyParams {
    /// Fresh parameters drawn from `rng`.
    pub fn init(config: PolicyConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for spec in specs {
            let numel: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Uniform(bound) => (0..numel).map(|_| rng.random_range(-bound..bound)).collect(),
                Init::Normal => (0..numel).map(|_| rng.sample(StandardNormal)).collect(),
                Init::Const(c) => vec![c; numel],
            };
            names.push(spec.name);
            tensors.push(Tensor::new(spec.shape, data)?);
        }
        Ok(PolicyParams { config, names, tensors, layout_cache: LayoutCache(layout) })
    }

    /// Rebuilds parameters from named tensors, checking that the names and
    /// shapes are exactly those implied by `config`.
    pub fn from_named(config: PolicyConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (layout, specs) = plan(&config);
        if named.len() != specs.len() {
            return Err(Error::dim(
                "policy params",
                format!("expected {} tensors, found {}", specs.len(), named.len()),
            ));
        }
        let mut names = Vec::with_capacity(specs.len());
        let mut tensors = Vec::with_capacity(specs.len());
        for (spec, (name, t)) in specs.into_iter().zip(named) {
            if spec.name != name || spec.shape != t.shape() {
                return Err(Error::dim(
                    "policy params",
                    format!("expected {} {:?}, found {} {:?}", spec.name, spec.shape, name, t.shape()),
                ));
            }
            if !t.is_finite() {
                return Err(Error::dim("policy params", format!("{name} holds non-finite values")));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(PolicyParams { config, names, tensors, layout_cache: LayoutCache(layout) })
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout_cache.0
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Records every tensor as a trainable leaf; the returned handles follow
    /// [`PolicyParams::iter`] order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self.iter().map(|(n, t)| tape.param(n, t)).collect();
        BoundParams { vars }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}

/// Tape handles of a [`PolicyParams`], indexed like the [`Layout`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
