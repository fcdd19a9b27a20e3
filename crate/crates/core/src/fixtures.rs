//! Deterministic synthetic checkpoints for tests, demos and smoke checks.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{Activation, Checkpoint, ModelConfig, PeType};
use crate::tensor::{NormKind, Tensor};

/// Architecture knobs for a random model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_position: usize,
    pub pe_type: PeType,
    pub norm_kind: NormKind,
    pub activation: Activation,
    pub tied_lm_head: bool,
    pub biases: bool,
    pub qk_norm: bool,
    pub emb_norm: bool,
    pub parallel_residual: bool,
    pub rotary_dim: Option<usize>,
}

impl FixtureSpec {
    /// GPT-2 style: learned absolute positions, LayerNorm, GELU, biases, tied head.
    pub fn gpt2(n_layers: usize) -> Self {
        Self {
            n_layers,
            d_model: 16,
            n_heads: 4,
            n_kv_heads: 4,
            d_ff: 64,
            vocab_size: 64,
            max_position: 256,
            pe_type: PeType::Absolute,
            norm_kind: NormKind::LayerNorm,
            activation: Activation::Gelu,
            tied_lm_head: true,
            biases: true,
            qk_norm: false,
            emb_norm: false,
            parallel_residual: false,
            rotary_dim: None,
        }
    }

    /// Llama style: rotary, RMSNorm, SwiGLU, grouped-query attention.
    pub fn llama(n_layers: usize) -> Self {
        Self {
            n_layers,
            d_model: 16,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 48,
            vocab_size: 64,
            max_position: 256,
            pe_type: PeType::Rotary,
            norm_kind: NormKind::RmsNorm,
            activation: Activation::Silu,
            tied_lm_head: false,
            biases: false,
            qk_norm: false,
            emb_norm: false,
            parallel_residual: false,
            rotary_dim: None,
        }
    }

    /// Qwen3 style: Llama plus per-head QK RMS norms.
    pub fn qwen(n_layers: usize) -> Self {
        Self {
            qk_norm: true,
            ..Self::llama(n_layers)
        }
    }

    /// BLOOM style: ALiBi, embedding LayerNorm, biases.
    pub fn bloom(n_layers: usize) -> Self {
        Self {
            pe_type: PeType::Alibi,
            emb_norm: true,
            ..Self::gpt2(n_layers)
        }
    }

    /// GPT-NeoX / Pythia style: parallel residual, partial rotary.
    pub fn neox(n_layers: usize) -> Self {
        Self {
            pe_type: PeType::Rotary,
            parallel_residual: true,
            rotary_dim: Some(2),
            activation: Activation::GeluExact,
            tied_lm_head: false,
            ..Self::gpt2(n_layers)
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            name: None,
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_kv_heads: self.n_kv_heads,
            d_ff: self.d_ff,
            vocab_size: self.vocab_size,
            pe_type: self.pe_type,
            norm_kind: self.norm_kind,
            activation: self.activation,
            max_position: self.max_position,
            tied_lm_head: self.tied_lm_head,
            norm_eps: 1e-5,
            rope_theta: 10000.0,
            rotary_dim: self.rotary_dim,
            parallel_residual: self.parallel_residual,
        }
    }
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn tensor(&mut self, shape: Vec<usize>, scale: f32) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.0.random_range(-scale..scale)).collect();
        Tensor::new(shape, data).expect("valid fixture shape")
    }

    fn gain(&mut self, n: usize) -> Tensor {
        let data = (0..n).map(|_| 1.0 + self.0.random_range(-0.1f32..0.1)).collect();
        Tensor::new(vec![n], data).expect("valid fixture shape")
    }
}

/// Random model with uniform weights scaled by `1/sqrt(fan_in)`.
pub fn random_model(spec: &FixtureSpec, seed: u64) -> Result<Checkpoint> {
    let cfg = spec.config();
    cfg.validate()?;
    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed));
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let qw = cfg.n_heads * hd;
    let kvw = cfg.kv_width();
    let ff = cfg.d_ff;
    let inv = |n: usize| 1.7 / (n as f32).sqrt();
    let mut t: BTreeMap<String, Tensor> = BTreeMap::new();
    t.insert("tok_emb".into(), g.tensor(vec![cfg.vocab_size, d], 1.0));
    if cfg.pe_type == PeType::Absolute {
        t.insert("pos_emb".into(), g.tensor(vec![cfg.max_position, d], 0.3));
    }
    let with_bias = cfg.norm_kind == NormKind::LayerNorm;
    let norm = |t: &mut BTreeMap<String, Tensor>, g: &mut Gen, prefix: &str| {
        t.insert(format!("{prefix}.gain"), g.gain(d));
        if with_bias {
            t.insert(format!("{prefix}.bias"), g.tensor(vec![d], 0.05));
        }
    };
    if spec.emb_norm {
        norm(&mut t, &mut g, "emb_norm");
    }
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        norm(&mut t, &mut g, &p("attn_norm"));
        norm(&mut t, &mut g, &p("mlp_norm"));
        t.insert(p("Wq"), g.tensor(vec![d, qw], inv(d)));
        t.insert(p("Wk"), g.tensor(vec![d, kvw], inv(d)));
        t.insert(p("Wv"), g.tensor(vec![d, kvw], inv(d)));
        t.insert(p("Wo"), g.tensor(vec![qw, d], inv(qw)));
        t.insert(p("W_up"), g.tensor(vec![d, ff], inv(d)));
        t.insert(p("W_down"), g.tensor(vec![ff, d], inv(ff)));
        if cfg.activation.is_gated() {
            t.insert(p("W_gate"), g.tensor(vec![d, ff], inv(d)));
        }
        if spec.biases {
            t.insert(p("bq"), g.tensor(vec![qw], 0.05));
            t.insert(p("bk"), g.tensor(vec![kvw], 0.05));
            t.insert(p("bv"), g.tensor(vec![kvw], 0.05));
            t.insert(p("bo"), g.tensor(vec![d], 0.05));
            t.insert(p("b_up"), g.tensor(vec![ff], 0.05));
            t.insert(p("b_down"), g.tensor(vec![d], 0.05));
        }
        if spec.qk_norm {
            t.insert(p("q_norm.gain"), g.gain(hd));
            t.insert(p("k_norm.gain"), g.gain(hd));
        }
    }
    norm(&mut t, &mut g, "final_norm");
    if !cfg.tied_lm_head {
        t.insert("lm_head".into(), g.tensor(vec![d, cfg.vocab_size], inv(d) * 2.0));
    }
    Checkpoint::from_named(cfg, t)
}

/// The small golden model: two GPT-2 style layers, `d_model = 8`.
pub fn golden_two_layer() -> Checkpoint {
    let spec = FixtureSpec {
        d_model: 8,
        n_heads: 2,
        n_kv_heads: 2,
        d_ff: 32,
        vocab_size: 32,
        max_position: 64,
        ..FixtureSpec::gpt2(2)
    };
    let mut m = random_model(&spec, 2024).expect("valid golden spec");
    m.config.name = Some("golden-2layer".into());
    m
}

/// Copy of `model` in which every layer holds layer 0's weights.
pub fn identical_layers(model: &Checkpoint) -> Checkpoint {
    let mut out = model.clone();
    let first = out.layers[0].clone();
    for l in out.layers.iter_mut() {
        *l = first.clone();
    }
    out
}

/// Copy of `model` with a zero output head, so every position predicts the
/// uniform distribution over the vocabulary.
pub fn uniform_logits(model: &Checkpoint) -> Checkpoint {
    let mut out = model.clone();
    out.config.tied_lm_head = false;
    out.lm_head = Some(Tensor::zeros(vec![out.config.d_model, out.config.vocab_size]));
    out
}

/// Copy of `model` whose attention ignores query/key content (zero Q/K
/// projections), so attention is uniform over the causal prefix and rotary
/// angles have nothing to act on.
pub fn content_blind_attention(model: &Checkpoint) -> Checkpoint {
    let mut out = model.clone();
    for l in out.layers.iter_mut() {
        l.wq = Tensor::zeros(l.wq.shape().to_vec());
        l.wk = Tensor::zeros(l.wk.shape().to_vec());
        l.bq = l.bq.as_ref().map(|b| vec![0.0; b.len()]);
        l.bk = l.bk.as_ref().map(|b| vec![0.0; b.len()]);
    }
    out
}

/// Deterministic pseudo-random token sequences.
pub fn random_prompts(vocab: usize, count: usize, len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(0..vocab as u32)).collect())
        .collect()
}
