use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::NormKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeType {
    Absolute,
    Rotary,
    Alibi,
}

/// MLP nonlinearity. `Silu` implies a gated (SwiGLU) MLP with a separate
/// gate projection; the others are plain two-layer MLPs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// tanh approximation, as used by GPT-2.
    Gelu,
    GeluExact,
    Relu,
    Silu,
}

impl Activation {
    pub fn is_gated(self) -> bool {
        matches!(self, Activation::Silu)
    }

    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Gelu => crate::tensor::gelu_tanh(x),
            Activation::GeluExact => crate::tensor::gelu_exact(x),
            Activation::Relu => x.max(0.0),
            Activation::Silu => crate::tensor::silu(x),
        }
    }
}

fn default_eps() -> f32 {
    1e-5
}

fn default_theta() -> f32 {
    10000.0
}

/// Architecture descriptor of a decoder-only transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub pe_type: PeType,
    pub norm_kind: NormKind,
    pub activation: Activation,
    pub max_position: usize,
    pub tied_lm_head: bool,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
    #[serde(default = "default_theta")]
    pub rope_theta: f32,
    /// Rotated leading dimensions per head; `None` rotates the whole head.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rotary_dim: Option<usize>,
    /// GPT-NeoX style `x + attn(ln1 x) + mlp(ln2 x)`.
    #[serde(default)]
    pub parallel_residual: bool,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Query heads per key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn rotary_dim(&self) -> usize {
        self.rotary_dim.unwrap_or_else(|| self.head_dim())
    }

    pub fn model_id(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            format!(
                "L{}-d{}-h{}-{:?}",
                self.n_layers, self.d_model, self.n_heads, self.pe_type
            )
            .to_lowercase()
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers < 1 {
            return fail("n_layers must be at least 1".into());
        }
        if self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 {
            return fail("d_model, n_heads and n_kv_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return fail(format!(
                "n_heads {} is not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.d_ff == 0 || self.vocab_size == 0 || self.max_position == 0 {
            return fail("d_ff, vocab_size and max_position must be positive".into());
        }
        if !(self.norm_eps > 0.0) {
            return fail(format!("norm_eps must be > 0, got {}", self.norm_eps));
        }
        if self.pe_type == PeType::Rotary {
            let rd = self.rotary_dim();
            if !rd.is_multiple_of(2) || rd > self.head_dim() || !self.head_dim().is_multiple_of(2) {
                return fail(format!(
                    "rotary needs even head_dim/rotary_dim, got {}/{}",
                    self.head_dim(),
                    rd
                ));
            }
        }
        Ok(())
    }
}
