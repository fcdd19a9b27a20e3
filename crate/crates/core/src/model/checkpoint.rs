//! Typed transformer weights and the on-disk container.
//!
//! Container layout: an 8-byte little-endian header length, a UTF-8 JSON
//! header, then the raw little-endian f32 payload. The header maps every
//! tensor name to `{dtype, shape, offset, length}` (offsets relative to the
//! start of the payload, lengths in bytes) and carries the model config under
//! the reserved key `"config"`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct NormWeights {
    pub gain: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

/// Weights of one residual block. Projection matrices are stored
/// input-major (`x · W`), so `wq` is `[d_model, n_heads * head_dim]` and the
/// columns of head `h` are `h * head_dim .. (h + 1) * head_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: NormWeights,
    pub wq: Tensor,
    pub bq: Option<Vec<f32>>,
    pub wk: Tensor,
    pub bk: Option<Vec<f32>>,
    pub wv: Tensor,
    pub bv: Option<Vec<f32>>,
    pub wo: Tensor,
    pub bo: Option<Vec<f32>>,
    /// Per-head RMS gains on queries and keys (shared across heads).
    pub q_norm: Option<Vec<f32>>,
    pub k_norm: Option<Vec<f32>>,
    pub mlp_norm: NormWeights,
    pub w_gate: Option<Tensor>,
    pub b_gate: Option<Vec<f32>>,
    pub w_up: Tensor,
    pub b_up: Option<Vec<f32>>,
    pub w_down: Tensor,
    pub b_down: Option<Vec<f32>>,
}

fn mean_vec(a: &[f32], b: &[f32]) -> Vec<f32> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

fn mean_opt(a: &Option<Vec<f32>>, b: &Option<Vec<f32>>) -> Option<Vec<f32>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(mean_vec(a, b)),
        _ => a.clone(),
    }
}

fn mean_tensor(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::new(a.shape().to_vec(), mean_vec(a.data(), b.data())).expect("same shape")
}

fn mean_norm(a: &NormWeights, b: &NormWeights) -> NormWeights {
    NormWeights {
        gain: mean_vec(&a.gain, &b.gain),
        bias: mean_opt(&a.bias, &b.bias),
    }
}

impl LayerWeights {
    /// Elementwise `(a + b) / 2` of every parameter.
    pub fn average(a: &LayerWeights, b: &LayerWeights) -> LayerWeights {
        LayerWeights {
            attn_norm: mean_norm(&a.attn_norm, &b.attn_norm),
            wq: mean_tensor(&a.wq, &b.wq),
            bq: mean_opt(&a.bq, &b.bq),
            wk: mean_tensor(&a.wk, &b.wk),
            bk: mean_opt(&a.bk, &b.bk),
            wv: mean_tensor(&a.wv, &b.wv),
            bv: mean_opt(&a.bv, &b.bv),
            wo: mean_tensor(&a.wo, &b.wo),
            bo: mean_opt(&a.bo, &b.bo),
            q_norm: mean_opt(&a.q_norm, &b.q_norm),
            k_norm: mean_opt(&a.k_norm, &b.k_norm),
            mlp_norm: mean_norm(&a.mlp_norm, &b.mlp_norm),
            w_gate: match (&a.w_gate, &b.w_gate) {
                (Some(x), Some(y)) => Some(mean_tensor(x, y)),
                _ => a.w_gate.clone(),
            },
            b_gate: mean_opt(&a.b_gate, &b.b_gate),
            w_up: mean_tensor(&a.w_up, &b.w_up),
            b_up: mean_opt(&a.b_up, &b.b_up),
            w_down: mean_tensor(&a.w_down, &b.w_down),
            b_down: mean_opt(&a.b_down, &b.b_down),
        }
    }
}

/// A complete decoder-only model: config plus every tensor, validated.
///
/// Immutable after construction; forward passes borrow it and apply
/// interventions as per-call overlays.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Option<Tensor>,
    pub emb_norm: Option<NormWeights>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: NormWeights,
    pub lm_head: Option<Tensor>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

/// Names and shapes the loader understands, with whether each is required.
fn tensor_schema(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let qw = cfg.n_heads * hd;
    let kvw = cfg.kv_width();
    let ff = cfg.d_ff;
    let mut s = vec![
        ("tok_emb".to_string(), vec![cfg.vocab_size, d], true),
        (
            "pos_emb".to_string(),
            vec![cfg.max_position, d],
            cfg.pe_type == super::PeType::Absolute,
        ),
        ("emb_norm.gain".to_string(), vec![d], false),
        ("emb_norm.bias".to_string(), vec![d], false),
        ("final_norm.gain".to_string(), vec![d], true),
        ("final_norm.bias".to_string(), vec![d], false),
        ("lm_head".to_string(), vec![d, cfg.vocab_size], !cfg.tied_lm_head),
    ];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("layers.{l}.{n}");
        let gated = cfg.activation.is_gated();
        s.extend([
            (p("attn_norm.gain"), vec![d], true),
            (p("attn_norm.bias"), vec![d], false),
            (p("Wq"), vec![d, qw], true),
            (p("bq"), vec![qw], false),
            (p("Wk"), vec![d, kvw], true),
            (p("bk"), vec![kvw], false),
            (p("Wv"), vec![d, kvw], true),
            (p("bv"), vec![kvw], false),
            (p("Wo"), vec![qw, d], true),
            (p("bo"), vec![d], false),
            (p("q_norm.gain"), vec![hd], false),
            (p("k_norm.gain"), vec![hd], false),
            (p("mlp_norm.gain"), vec![d], true),
            (p("mlp_norm.bias"), vec![d], false),
            (p("W_gate"), vec![d, ff], gated),
            (p("b_gate"), vec![ff], false),
            (p("W_up"), vec![d, ff], true),
            (p("b_up"), vec![ff], false),
            (p("W_down"), vec![ff, d], true),
            (p("b_down"), vec![d], false),
        ]);
    }
    s
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl Checkpoint {
    /// Validates every tensor against config-derived shapes and builds the
    /// typed model. Unknown tensor names are rejected.
    pub fn from_named(config: ModelConfig, mut tensors: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        for (name, shape, required) in tensor_schema(&config) {
            match tensors.get(&name) {
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Shape {
                        name,
                        expected: shape,
                        found: t.shape().to_vec(),
                    })
                }
                Some(t) => t.ensure_finite(&name)?,
                None if required => {
                    return Err(Error::Header(format!("missing required tensor `{name}`")))
                }
                None => {}
            }
        }
        let known: std::collections::HashSet<String> =
            tensor_schema(&config).into_iter().map(|(n, _, _)| n).collect();
        if let Some(extra) = tensors.keys().find(|k| !known.contains(*k)) {
            return Err(Error::Header(format!("unexpected tensor `{extra}`")));
        }

        let mut take = |name: &str| tensors.remove(name);
        let vec_of = |t: Option<Tensor>| t.map(Tensor::into_data);
        let norm = |take: &mut dyn FnMut(&str) -> Option<Tensor>, prefix: &str| -> Option<NormWeights> {
            let gain = take(&format!("{prefix}.gain"))?.into_data();
            let bias = take(&format!("{prefix}.bias")).map(Tensor::into_data);
            Some(NormWeights { gain, bias })
        };

        let tok_emb = take("tok_emb").expect("validated");
        let pos_emb = take("pos_emb");
        let emb_norm = norm(&mut take, "emb_norm");
        let final_norm = norm(&mut take, "final_norm").expect("validated");
        let lm_head = take("lm_head");
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |n: &str| format!("layers.{l}.{n}");
            layers.push(LayerWeights {
                attn_norm: norm(&mut take, &p("attn_norm")).expect("validated"),
                wq: take(&p("Wq")).expect("validated"),
                bq: vec_of(take(&p("bq"))),
                wk: take(&p("Wk")).expect("validated"),
                bk: vec_of(take(&p("bk"))),
                wv: take(&p("Wv")).expect("validated"),
                bv: vec_of(take(&p("bv"))),
                wo: take(&p("Wo")).expect("validated"),
                bo: vec_of(take(&p("bo"))),
                q_norm: vec_of(take(&p("q_norm.gain"))),
                k_norm: vec_of(take(&p("k_norm.gain"))),
                mlp_norm: norm(&mut take, &p("mlp_norm")).expect("validated"),
                w_gate: take(&p("W_gate")),
                b_gate: vec_of(take(&p("b_gate"))),
                w_up: take(&p("W_up")).expect("validated"),
                b_up: vec_of(take(&p("b_up"))),
                w_down: take(&p("W_down")).expect("validated"),
                b_down: vec_of(take(&p("b_down"))),
            });
        }
        // Drop config-irrelevant tensors (e.g. W_gate on an ungated model).
        if !config.activation.is_gated() {
            for l in &mut layers {
                l.w_gate = None;
                l.b_gate = None;
            }
        }
        let pos_emb = if config.pe_type == super::PeType::Absolute {
            pos_emb
        } else {
            None
        };
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            emb_norm,
            layers,
            final_norm,
            lm_head,
        })
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        let vec_t = |v: &[f32]| Tensor::new(vec![v.len()], v.to_vec()).expect("nonempty");
        let put_norm = |out: &mut BTreeMap<String, Tensor>, prefix: &str, n: &NormWeights| {
            out.insert(format!("{prefix}.gain"), vec_t(&n.gain));
            if let Some(b) = &n.bias {
                out.insert(format!("{prefix}.bias"), vec_t(b));
            }
        };
        out.insert("tok_emb".into(), self.tok_emb.clone());
        if let Some(p) = &self.pos_emb {
            out.insert("pos_emb".into(), p.clone());
        }
        if let Some(n) = &self.emb_norm {
            put_norm(&mut out, "emb_norm", n);
        }
        put_norm(&mut out, "final_norm", &self.final_norm);
        if let Some(h) = &self.lm_head {
            out.insert("lm_head".into(), h.clone());
        }
        for (l, w) in self.layers.iter().enumerate() {
            let p = |n: &str| format!("layers.{l}.{n}");
            put_norm(&mut out, &p("attn_norm"), &w.attn_norm);
            put_norm(&mut out, &p("mlp_norm"), &w.mlp_norm);
            out.insert(p("Wq"), w.wq.clone());
            out.insert(p("Wk"), w.wk.clone());
            out.insert(p("Wv"), w.wv.clone());
            out.insert(p("Wo"), w.wo.clone());
            out.insert(p("W_up"), w.w_up.clone());
            out.insert(p("W_down"), w.w_down.clone());
            if let Some(g) = &w.w_gate {
                out.insert(p("W_gate"), g.clone());
            }
            for (name, v) in [
                ("bq", &w.bq),
                ("bk", &w.bk),
                ("bv", &w.bv),
                ("bo", &w.bo),
                ("q_norm.gain", &w.q_norm),
                ("k_norm.gain", &w.k_norm),
                ("b_gate", &w.b_gate),
                ("b_up", &w.b_up),
                ("b_down", &w.b_down),
            ] {
                if let Some(v) = v {
                    out.insert(p(name), vec_t(v));
                }
            }
        }
        out
    }

    /// Serializes to the container format. Tensors are laid out in sorted
    /// name order, so the output is a pure function of the model.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.to_named();
        let mut header = serde_json::Map::new();
        header.insert("config".into(), serde_json::to_value(&self.config)?);
        let mut payload = Vec::new();
        for (name, t) in &named {
            let offset = payload.len() as u64;
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            let entry = TensorEntry {
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
                length: payload.len() as u64 - offset,
            };
            header.insert(name.clone(), serde_json::to_value(entry)?);
        }
        let header_bytes = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + header_bytes.len() + payload.len());
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Header("file shorter than the 8-byte length prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Header(format!("header length {header_len} exceeds file")))?;
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..header_end])
                .map_err(|e| Error::Header(format!("invalid JSON header: {e}")))?;
        let payload = &bytes[header_end..];
        let mut config = None;
        let mut tensors = BTreeMap::new();
        for (name, value) in header {
            if name == "config" {
                config = Some(
                    serde_json::from_value::<ModelConfig>(value)
                        .map_err(|e| Error::Header(format!("invalid config block: {e}")))?,
                );
                continue;
            }
            if name == "__metadata__" {
                continue;
            }
            let entry: TensorEntry = serde_json::from_value(value)
                .map_err(|e| Error::Header(format!("bad entry for `{name}`: {e}")))?;
            if entry.dtype != "f32" {
                return Err(Error::Header(format!(
                    "tensor `{name}` has dtype {}, only f32 is supported",
                    entry.dtype
                )));
            }
            let n: usize = entry.shape.iter().product();
            if entry.length != 4 * n as u64 {
                return Err(Error::Header(format!(
                    "tensor `{name}`: length {} does not match shape {:?}",
                    entry.length, entry.shape
                )));
            }
            let start = entry.offset as usize;
            let end = start + entry.length as usize;
            if end > payload.len() {
                return Err(Error::Header(format!("tensor `{name}` runs past end of payload")));
            }
            let data: Vec<f32> = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, data).map_err(|e| match e {
                Error::Dimension(m) => Error::Header(format!("tensor `{name}`: {m}")),
                other => other,
            })?;
            tensors.insert(name, t);
        }
        let config = config.ok_or_else(|| Error::Header("header has no `config` block".into()))?;
        Self::from_named(config, tensors)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 over the serialized tensor payload (header excluded).
    pub fn payload_hash(&self) -> String {
        let mut h = Sha256::new();
        for t in self.to_named().values() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// SHA-256 of the full serialized container.
    pub fn file_hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }
}

/// Reads and validates a checkpoint container.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// SHA-256 of a file on disk, for run manifests.
pub fn hash_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
