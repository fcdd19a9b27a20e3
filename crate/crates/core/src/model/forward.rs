//! Teacher-forced forward pass over an [`ExecutionPlan`].

use std::collections::HashMap;

use super::checkpoint::{Checkpoint, LayerWeights, NormWeights};
use super::config::{ModelConfig, PeType};
use super::intervention::{ExecutionPlan, InterventionSpec, Slot};
use crate::error::{Error, Result};
use crate::tensor::{self, apply_rotary, matmul, matmul_transposed, normalize, NormKind, RotarySpec, Tensor};

/// Which sequence positions get logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub capture: bool,
    pub logits: LogitRows,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            capture: false,
            logits: LogitRows::All,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    /// `[logit_positions.len(), vocab]`.
    pub logits: Tensor,
    pub logit_positions: Vec<usize>,
    /// Residual stream at every block boundary: entry 0 is the input of the
    /// first executed block, entry `k + 1` the output of executed block `k`.
    pub hidden: Option<Vec<Tensor>>,
}

impl ForwardResult {
    /// Next-token distribution at logit row `row`.
    pub fn distribution(&self, row: usize) -> Vec<f64> {
        tensor::softmax_f64(self.logits.row(row))
    }

    pub fn distributions(&self) -> Vec<Vec<f64>> {
        (0..self.logits.rows()).map(|r| self.distribution(r)).collect()
    }

    pub fn last_distribution(&self) -> Vec<f64> {
        self.distribution(self.logits.rows() - 1)
    }
}

/// Full forward returning logits at every position.
pub fn forward(
    model: &Checkpoint,
    tokens: &[u32],
    interventions: &[InterventionSpec],
    capture: bool,
) -> Result<ForwardResult> {
    forward_with(
        model,
        tokens,
        interventions,
        ForwardOptions {
            capture,
            logits: LogitRows::All,
        },
    )
}

pub fn forward_with(
    model: &Checkpoint,
    tokens: &[u32],
    interventions: &[InterventionSpec],
    opts: ForwardOptions,
) -> Result<ForwardResult> {
    let plan = ExecutionPlan::resolve(model, interventions)?;
    forward_plan(model, tokens, &plan, opts)
}

pub fn forward_plan(
    model: &Checkpoint,
    tokens: &[u32],
    plan: &ExecutionPlan,
    opts: ForwardOptions,
) -> Result<ForwardResult> {
    let cfg = &model.config;
    let mut x = embed(model, tokens)?;
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut hidden = opts.capture.then(|| vec![x.clone()]);
    for slot in &plan.slots {
        let block = BlockView::new(model, plan, slot);
        x = block.forward(cfg, &x, &positions, plan.rope_enabled)?;
        if let Some(h) = hidden.as_mut() {
            h.push(x.clone());
        }
    }
    let logit_positions: Vec<usize> = match opts.logits {
        LogitRows::All => positions.clone(),
        LogitRows::Last => vec![tokens.len() - 1],
    };
    let rows: Vec<Vec<f32>> = logit_positions
        .iter()
        .map(|&t| norm_row(cfg, x.row(t), &model.final_norm))
        .collect::<Result<_>>()?;
    let h = Tensor::from_rows(&rows)?;
    let logits = match &model.lm_head {
        Some(head) => matmul(&h, head)?,
        None => matmul_transposed(&h, &model.tok_emb)?,
    };
    Ok(ForwardResult {
        logits,
        logit_positions,
        hidden,
    })
}

fn embed(model: &Checkpoint, tokens: &[u32]) -> Result<Tensor> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::Domain("empty token sequence".into()));
    }
    if tokens.len() > cfg.max_position {
        return Err(Error::Domain(format!(
            "sequence length {} exceeds max_position {}",
            tokens.len(),
            cfg.max_position
        )));
    }
    let mut x = Tensor::zeros(vec![tokens.len(), cfg.d_model]);
    for (t, &id) in tokens.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(Error::Domain(format!(
                "token id {id} at position {t} >= vocab_size {}",
                cfg.vocab_size
            )));
        }
        let row = x.row_mut(t);
        row.copy_from_slice(model.tok_emb.row(id as usize));
        if let Some(pe) = &model.pos_emb {
            for (r, &p) in row.iter_mut().zip(pe.row(t)) {
                *r += p;
            }
        }
        if let Some(n) = &model.emb_norm {
            let normed = normalize(row, &n.gain, n.bias.as_deref(), cfg.norm_kind, cfg.norm_eps)?;
            row.copy_from_slice(&normed);
        }
    }
    Ok(x)
}

fn norm_row(cfg: &ModelConfig, x: &[f32], n: &NormWeights) -> Result<Vec<f32>> {
    normalize(x, &n.gain, n.bias.as_deref(), cfg.norm_kind, cfg.norm_eps)
}

fn norm_rows(cfg: &ModelConfig, x: &Tensor, n: &NormWeights) -> Result<Tensor> {
    let rows: Vec<Vec<f32>> = (0..x.rows())
        .map(|t| norm_row(cfg, x.row(t), n))
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

fn add_bias(t: &mut Tensor, bias: Option<&[f32]>) {
    if let Some(b) = bias {
        for r in 0..t.rows() {
            for (v, &bv) in t.row_mut(r).iter_mut().zip(b) {
                *v += bv;
            }
        }
    }
}

fn linear(x: &Tensor, w: &Tensor, b: Option<&[f32]>) -> Result<Tensor> {
    let mut y = matmul(x, w)?;
    add_bias(&mut y, b);
    Ok(y)
}

fn linear_row(x: &[f32], w: &Tensor, b: Option<&[f32]>) -> Result<Vec<f32>> {
    let mut y = tensor::vecmat(x, w)?;
    if let Some(b) = b {
        for (v, &bv) in y.iter_mut().zip(b) {
            *v += bv;
        }
    }
    Ok(y)
}

/// ALiBi head slopes, including the interleaved extension for head counts
/// that are not a power of two.
pub fn alibi_slopes(n_heads: usize) -> Vec<f32> {
    let closest = 1usize << (usize::BITS - 1 - n_heads.leading_zeros());
    let base = 2f64.powf(-8.0 / closest as f64);
    let mut slopes: Vec<f32> = (1..=closest).map(|i| base.powi(i as i32) as f32).collect();
    if closest < n_heads {
        let extra_base = 2f64.powf(-8.0 / (2 * closest) as f64);
        slopes.extend(
            (1..=2 * (n_heads - closest))
                .step_by(2)
                .map(|i| extra_base.powi(i as i32) as f32),
        );
    }
    slopes
}

/// Copies columns `[start, start + width)` out of a 2-D tensor.
fn column_block(t: &Tensor, start: usize, width: usize) -> Tensor {
    let rows: Vec<Vec<f32>> = (0..t.rows())
        .map(|r| t.row(r)[start..start + width].to_vec())
        .collect();
    Tensor::from_rows(&rows).expect("nonempty block")
}

/// Per-head query/key preparation: optional RMS QK-norm, then rotary.
fn prep_head(
    cfg: &ModelConfig,
    x: Tensor,
    gain: Option<&[f32]>,
    positions: &[usize],
    rope_enabled: bool,
) -> Result<Tensor> {
    let x = match gain {
        Some(g) => {
            let rows: Vec<Vec<f32>> = (0..x.rows())
                .map(|r| normalize(x.row(r), g, None, NormKind::RmsNorm, cfg.norm_eps))
                .collect::<Result<_>>()?;
            Tensor::from_rows(&rows)?
        }
        None => x,
    };
    if cfg.pe_type != PeType::Rotary {
        return Ok(x);
    }
    let spec = RotarySpec {
        head_dim: cfg.head_dim(),
        rotary_dim: cfg.rotary_dim(),
        theta_base: cfg.rope_theta,
    };
    apply_rotary(&x, positions, spec, rope_enabled)
}

/// Causal attention of query `q` (at position `t`) over key/value rows
/// `0..=t`.
fn attend_row(q: &[f32], k: &Tensor, v: &Tensor, t: usize, slope: Option<f32>) -> Vec<f32> {
    let scale = 1.0 / (q.len() as f32).sqrt();
    let mut scores: Vec<f32> = (0..=t)
        .map(|s| {
            let mut sc = tensor::dot(q, k.row(s)) * scale;
            if let Some(m) = slope {
                sc += m * (s as f32 - t as f32);
            }
            sc
        })
        .collect();
    let max = scores.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f32;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    let mut out = vec![0.0f32; v.cols()];
    for (s, &p) in scores.iter().enumerate() {
        let w = p / sum;
        for (o, &vv) in out.iter_mut().zip(v.row(s)) {
            *o += w * vv;
        }
    }
    out
}

fn mlp(cfg: &ModelConfig, w: &LayerWeights, h: &Tensor) -> Result<Tensor> {
    let mut up = linear(h, &w.w_up, w.b_up.as_deref())?;
    match &w.w_gate {
        Some(wg) if cfg.activation.is_gated() => {
            let gate = linear(h, wg, w.b_gate.as_deref())?;
            for (u, &g) in up.data_mut().iter_mut().zip(gate.data()) {
                *u *= cfg.activation.apply(g);
            }
        }
        _ => {
            for u in up.data_mut() {
                *u = cfg.activation.apply(*u);
            }
        }
    }
    linear(&up, &w.w_down, w.b_down.as_deref())
}

/// Weights routed to one executed slot.
struct BlockView<'a> {
    base: &'a LayerWeights,
    overrides: Vec<(usize, &'a LayerWeights)>,
}

impl<'a> BlockView<'a> {
    fn new(model: &'a Checkpoint, plan: &'a ExecutionPlan, slot: &Slot) -> Self {
        Self {
            base: plan.weights(model, slot.source),
            overrides: slot
                .head_overrides
                .iter()
                .map(|&(h, src)| (h, &model.layers[src]))
                .collect(),
        }
    }

    fn head_weights(&self, h: usize) -> &'a LayerWeights {
        self.overrides
            .iter()
            .find(|(oh, _)| *oh == h)
            .map(|(_, w)| *w)
            .unwrap_or(self.base)
    }

    fn forward(&self, cfg: &ModelConfig, x: &Tensor, positions: &[usize], rope: bool) -> Result<Tensor> {
        let h1 = norm_rows(cfg, x, &self.base.attn_norm)?;
        let attn = self.attention(cfg, &h1, positions, rope)?;
        let mut out = x.clone();
        if cfg.parallel_residual {
            let h2 = norm_rows(cfg, x, &self.base.mlp_norm)?;
            let m = mlp(cfg, self.base, &h2)?;
            for ((o, &a), &mv) in out.data_mut().iter_mut().zip(attn.data()).zip(m.data()) {
                *o += a + mv;
            }
        } else {
            for (o, &a) in out.data_mut().iter_mut().zip(attn.data()) {
                *o += a;
            }
            let h2 = norm_rows(cfg, &out, &self.base.mlp_norm)?;
            let m = mlp(cfg, self.base, &h2)?;
            for (o, &mv) in out.data_mut().iter_mut().zip(m.data()) {
                *o += mv;
            }
        }
        out.ensure_finite("block output")?;
        Ok(out)
    }

    fn attention(&self, cfg: &ModelConfig, h: &Tensor, positions: &[usize], rope: bool) -> Result<Tensor> {
        let hd = cfg.head_dim();
        let seq = h.rows();
        let slopes = (cfg.pe_type == PeType::Alibi).then(|| alibi_slopes(cfg.n_heads));

        // Projections per distinct weight source, computed lazily.
        let mut proj: HashMap<*const LayerWeights, (Tensor, Tensor, Tensor)> = HashMap::new();
        let mut project = |w: &LayerWeights| -> Result<()> {
            let key = w as *const LayerWeights;
            if let std::collections::hash_map::Entry::Vacant(e) = proj.entry(key) {
                e.insert((
                    linear(h, &w.wq, w.bq.as_deref())?,
                    linear(h, &w.wk, w.bk.as_deref())?,
                    linear(h, &w.wv, w.bv.as_deref())?,
                ));
            }
            Ok(())
        };
        project(self.base)?;
        for (_, w) in &self.overrides {
            project(w)?;
        }

        let mut kv_cache: HashMap<(*const LayerWeights, usize), (Tensor, Tensor)> = HashMap::new();
        let mut head_out: Vec<Tensor> = Vec::with_capacity(cfg.n_heads);
        for head in 0..cfg.n_heads {
            let w = self.head_weights(head);
            let key = w as *const LayerWeights;
            let (q_all, k_all, v_all) = &proj[&key];
            let g = head / cfg.group_size();
            if let std::collections::hash_map::Entry::Vacant(e) = kv_cache.entry((key, g)) {
                let k = prep_head(cfg, column_block(k_all, g * hd, hd), w.k_norm.as_deref(), positions, rope)?;
                let v = column_block(v_all, g * hd, hd);
                e.insert((k, v));
            }
            let (k, v) = &kv_cache[&(key, g)];
            let q = prep_head(cfg, column_block(q_all, head * hd, hd), w.q_norm.as_deref(), positions, rope)?;
            let slope = slopes.as_ref().map(|s| s[head]);
            let rows: Vec<Vec<f32>> = (0..seq).map(|t| attend_row(q.row(t), k, v, t, slope)).collect();
            head_out.push(Tensor::from_rows(&rows)?);
        }

        if self.overrides.is_empty() {
            let rows: Vec<Vec<f32>> = (0..seq)
                .map(|t| head_out.iter().flat_map(|o| o.row(t).iter().copied()).collect())
                .collect();
            return linear(&Tensor::from_rows(&rows)?, &self.base.wo, self.base.bo.as_deref());
        }
        let mut out = Tensor::zeros(vec![seq, cfg.d_model]);
        for (head, o) in head_out.iter().enumerate() {
            let wo = &self.head_weights(head).wo;
            for t in 0..seq {
                let row = out.row_mut(t);
                for (c, &ov) in o.row(t).iter().enumerate() {
                    let w_row = wo.row(head * hd + c);
                    for (r, &wv) in row.iter_mut().zip(w_row) {
                        *r += ov * wv;
                    }
                }
            }
        }
        add_bias(&mut out, self.base.bo.as_deref());
        Ok(out)
    }
}

/// Residual update `g(x) = block(x) - x` of one layer, evaluated at the last
/// position of a fixed context while the last row of the block input varies.
///
/// Earlier rows' keys and values are cached, so each evaluation costs one
/// row's worth of projections.
pub struct BlockProbe<'a> {
    cfg: &'a ModelConfig,
    w: &'a LayerWeights,
    rope: bool,
    position: usize,
    /// Per kv-head `(keys, values)` for all context rows; the last row is a
    /// placeholder overwritten on each evaluation.
    kv: Vec<(Tensor, Tensor)>,
    x0: Vec<f32>,
}

impl<'a> BlockProbe<'a> {
    /// `input` is the block's input residual stream `[seq, d_model]`.
    pub fn new(model: &'a Checkpoint, layer: usize, input: &Tensor, rope_enabled: bool) -> Result<Self> {
        let cfg = &model.config;
        if layer >= cfg.n_layers {
            return Err(Error::Spec(format!("layer {layer} out of range")));
        }
        let w = &model.layers[layer];
        let seq = input.rows();
        let positions: Vec<usize> = (0..seq).collect();
        let h = norm_rows(cfg, input, &w.attn_norm)?;
        let k_all = linear(&h, &w.wk, w.bk.as_deref())?;
        let v_all = linear(&h, &w.wv, w.bv.as_deref())?;
        let hd = cfg.head_dim();
        let kv = (0..cfg.n_kv_heads)
            .map(|g| {
                let k = prep_head(cfg, column_block(&k_all, g * hd, hd), w.k_norm.as_deref(), &positions, rope_enabled)?;
                Ok((k, column_block(&v_all, g * hd, hd)))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            w,
            rope: rope_enabled,
            position: seq - 1,
            kv,
            x0: input.row(seq - 1).to_vec(),
        })
    }

    /// The probe point (last row of the block input).
    pub fn point(&self) -> &[f32] {
        &self.x0
    }

    pub fn dim(&self) -> usize {
        self.x0.len()
    }

    pub fn residual(&self, x: &[f32]) -> Result<Vec<f32>> {
        let cfg = self.cfg;
        let w = self.w;
        let hd = cfg.head_dim();
        let t = self.position;
        let pos = [t];
        let h1 = norm_row(cfg, x, &w.attn_norm)?;
        let q = linear_row(&h1, &w.wq, w.bq.as_deref())?;
        let k = linear_row(&h1, &w.wk, w.bk.as_deref())?;
        let v = linear_row(&h1, &w.wv, w.bv.as_deref())?;
        let slopes = (cfg.pe_type == PeType::Alibi).then(|| alibi_slopes(cfg.n_heads));
        let kv: Vec<(Tensor, Tensor)> = self
            .kv
            .iter()
            .enumerate()
            .map(|(g, (kc, vc))| {
                let k_new = prep_head(
                    cfg,
                    Tensor::new(vec![1, hd], k[g * hd..(g + 1) * hd].to_vec())?,
                    w.k_norm.as_deref(),
                    &pos,
                    self.rope,
                )?;
                let mut kc = kc.clone();
                let mut vc = vc.clone();
                kc.row_mut(t).copy_from_slice(k_new.row(0));
                vc.row_mut(t).copy_from_slice(&v[g * hd..(g + 1) * hd]);
                Ok((kc, vc))
            })
            .collect::<Result<_>>()?;
        let mut concat = Vec::with_capacity(cfg.n_heads * hd);
        for head in 0..cfg.n_heads {
            let g = head / cfg.group_size();
            let qh = prep_head(
                cfg,
                Tensor::new(vec![1, hd], q[head * hd..(head + 1) * hd].to_vec())?,
                w.q_norm.as_deref(),
                &pos,
                self.rope,
            )?;
            let slope = slopes.as_ref().map(|s| s[head]);
            concat.extend(attend_row(qh.row(0), &kv[g].0, &kv[g].1, t, slope));
        }
        let attn = linear_row(&concat, &w.wo, w.bo.as_deref())?;
        let row = |v: Vec<f32>| Tensor::new(vec![1, v.len()], v);
        let update = if cfg.parallel_residual {
            let h2 = norm_row(cfg, x, &w.mlp_norm)?;
            let m = mlp(cfg, w, &row(h2)?)?;
            attn.iter().zip(m.data()).map(|(a, b)| a + b).collect()
        } else {
            let r: Vec<f32> = x.iter().zip(&attn).map(|(a, b)| a + b).collect();
            let h2 = norm_row(cfg, &r, &w.mlp_norm)?;
            let m = mlp(cfg, w, &row(h2)?)?;
            attn.iter().zip(m.data()).map(|(a, b)| a + b).collect()
        };
        Ok(update)
    }
}
