use alloc::format;

use crate::error::{Error, Result};

/// Which output head sits on top of the shared encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadKind {
    /// Two Beta distributions over a quantile band.
    Band,
    /// Independent per-passage Bernoulli selection (ablation).
    Bernoulli,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::Band => "band",
            HeadKind::Bernoulli => "bernoulli",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "band" | "ldar" => Ok(HeadKind::Band),
            "bernoulli" => Ok(HeadKind::Bernoulli),
            other => Err(Error::config(format!("unknown policy head `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_frequencies: usize,
    pub param_floor: f64,
    pub sample_clamp: f64,
    pub head: HeadKind,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            d_model: 256,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 4 * 256,
            n_frequencies: 48,
            param_floor: 1e-4,
            sample_clamp: 1e-6,
            head: HeadKind::Band,
        }
    }
}

impl PolicyConfig {
    /// Reduced width used for CPU-bound training runs: `d_model` 64 and 16
    /// frequencies, everything else at the defaults.
    pub fn desk() -> Self {
        PolicyConfig { d_model: 64, ffn_dim: 256, n_frequencies: 16, ..Self::default() }
    }

    pub fn with_head(mut self, head: HeadKind) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.ffn_dim == 0 || self.n_frequencies == 0 {
            return Err(Error::config("ffn_dim and n_frequencies must be positive"));
        }
        if !(self.param_floor > 0.0) || !self.param_floor.is_finite() {
            return Err(Error::config(format!("param_floor {} must be positive", self.param_floor)));
        }
        if !(self.sample_clamp > 0.0 && self.sample_clamp < 0.5) {
            return Err(Error::config(format!("sample_clamp {} must lie in (0, 0.5)", self.sample_clamp)));
        }
        Ok(())
    }
}
