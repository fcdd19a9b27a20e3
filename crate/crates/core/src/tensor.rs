//! Dense f32 tensors and the handful of transformer primitives the forward
//! pass needs.
//!
//! Every reduction runs in a fixed loop order so results are bit-stable from
//! run to run on the same machine. Primitives reject non-finite values instead
//! of propagating them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, buffer has {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows of a 2-D tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a 2-D tensor (1 for vectors).
    pub fn cols(&self) -> usize {
        if self.shape.len() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(idx) => Err(Error::NonFinite(format!(
                "{what}: element {idx} is {}",
                self.data[idx]
            ))),
        }
    }

    fn expect_2d(&self, what: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{what} must be 2-D, got shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }
}

/// `a[m×k] · b[k×n]`.
///
/// Accumulation order is fixed (i, then k, then j), so the result is
/// reproducible bit-for-bit.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_2d("matmul lhs")?;
    let (k2, n) = b.expect_2d("matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
    let t = Tensor {
        shape: vec![m, n],
        data: out,
    };
    t.ensure_finite("matmul output")?;
    Ok(t)
}

/// `a[m×k] · b[n×k]ᵀ`, used for tied embedding heads.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.expect_2d("matmul lhs")?;
    let (n, k2) = b.expect_2d("matmul rhs")?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul_transposed inner dimensions disagree: {:?} x {:?}ᵀ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let a_row = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b.data[j * k..(j + 1) * k];
            out[i * n + j] = dot(a_row, b_row);
        }
    }
    let t = Tensor {
        shape: vec![m, n],
        data: out,
    };
    t.ensure_finite("matmul output")?;
    Ok(t)
}

/// Row-vector times matrix: `x[k] · w[k×n]`.
pub fn vecmat(x: &[f32], w: &Tensor) -> Result<Vec<f32>> {
    let (k, n) = w.expect_2d("vecmat rhs")?;
    if x.len() != k {
        return Err(Error::Dimension(format!(
            "vecmat: vector length {} vs matrix {:?}",
            x.len(),
            w.shape
        )));
    }
    let mut out = vec![0.0f32; n];
    for (p, &xp) in x.iter().enumerate() {
        if xp == 0.0 {
            continue;
        }
        for (o, &w_pj) in out.iter_mut().zip(&w.data[p * n..(p + 1) * n]) {
            *o += xp * w_pj;
        }
    }
    Ok(out)
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f32]) -> Result<Vec<f32>> {
    if logits.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    if let Some(v) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("softmax input contains {v}")));
    }
    let probs = softmax_f64(logits);
    Ok(probs.into_iter().map(|p| p as f32).collect())
}

/// Softmax evaluated in f64; distributions fed to KL and NLL use this.
pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `log p(target)` under the softmax of `logits`, in f64.
pub fn log_prob(logits: &[f32], target: usize) -> f64 {
    let max = logits.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
    let lse = logits
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits[target] as f64 - lse
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

/// Layer or RMS normalisation followed by the elementwise gain (and bias,
/// when present).
pub fn normalize(
    x: &[f32],
    gain: &[f32],
    bias: Option<&[f32]>,
    kind: NormKind,
    eps: f32,
) -> Result<Vec<f32>> {
    if x.len() != gain.len() || bias.is_some_and(|b| b.len() != x.len()) {
        return Err(Error::Dimension(format!(
            "normalize: input length {} vs gain length {}",
            x.len(),
            gain.len()
        )));
    }
    if x.is_empty() {
        return Err(Error::Dimension("normalize of an empty vector".into()));
    }
    if eps <= 0.0 {
        return Err(Error::Domain(format!("normalize eps must be > 0, got {eps}")));
    }
    let n = x.len() as f64;
    let (shift, scale) = match kind {
        NormKind::LayerNorm => {
            let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            (mean, 1.0 / (var + eps as f64).sqrt())
        }
        NormKind::RmsNorm => {
            let ms = x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
            (0.0, 1.0 / (ms + eps as f64).sqrt())
        }
    };
    let mut out: Vec<f32> = x
        .iter()
        .zip(gain)
        .map(|(&v, &g)| (((v as f64 - shift) * scale) as f32) * g)
        .collect();
    if let Some(b) = bias {
        for (o, &bv) in out.iter_mut().zip(b) {
            *o += bv;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normalize output".into()));
    }
    Ok(out)
}

/// Geometry of a rotary embedding applied to packed `[seq, heads * head_dim]`
/// query or key tensors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotarySpec {
    pub head_dim: usize,
    /// Leading dimensions of each head that are rotated; the rest pass through.
    pub rotary_dim: usize,
    pub theta_base: f32,
}

/// Rotary position embedding in the half-split convention: dimension `i` is
/// paired with `i + rotary_dim / 2`.
///
/// With `enabled == false` the input is returned unchanged, which is the same
/// as rotating every pair by a zero angle.
pub fn apply_rotary(
    x: &Tensor,
    positions: &[usize],
    spec: RotarySpec,
    enabled: bool,
) -> Result<Tensor> {
    let (seq, width) = x.expect_2d("rotary input")?;
    if !enabled {
        return Ok(x.clone());
    }
    if !spec.rotary_dim.is_multiple_of(2) || !spec.head_dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "rotary needs an even head dimension, got head_dim={} rotary_dim={}",
            spec.head_dim, spec.rotary_dim
        )));
    }
    if spec.rotary_dim > spec.head_dim || width % spec.head_dim != 0 {
        return Err(Error::Config(format!(
            "rotary geometry inconsistent: width {width}, head_dim {}, rotary_dim {}",
            spec.head_dim, spec.rotary_dim
        )));
    }
    if positions.len() != seq {
        return Err(Error::Dimension(format!(
            "rotary: {} positions for {seq} rows",
            positions.len()
        )));
    }
    let half = spec.rotary_dim / 2;
    let inv_freq: Vec<f64> = (0..half)
        .map(|i| (spec.theta_base as f64).powf(-((2 * i) as f64) / spec.rotary_dim as f64))
        .collect();
    let mut out = x.clone();
    for (t, &pos) in positions.iter().enumerate() {
        let trig: Vec<(f32, f32)> = inv_freq
            .iter()
            .map(|f| {
                let angle = pos as f64 * f;
                (angle.cos() as f32, angle.sin() as f32)
            })
            .collect();
        let row = out.row_mut(t);
        for head in row.chunks_mut(spec.head_dim) {
            for (i, &(c, s)) in trig.iter().enumerate() {
                let a = head[i];
                let b = head[i + half];
                head[i] = a * c - b * s;
                head[i + half] = b * c + a * s;
            }
        }
    }
    Ok(out)
}

pub fn gelu_tanh(x: f32) -> f32 {
    const K: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (K * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn gelu_exact(x: f32) -> f32 {
    0.5 * x * (1.0 + libm::erf(x as f64 / std::f64::consts::SQRT_2) as f32)
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}
