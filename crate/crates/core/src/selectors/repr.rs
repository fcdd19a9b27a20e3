//! Representation-similarity layer scores: Block Influence and linear CKA.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PromptSet;
use crate::model::{forward_with, Checkpoint, ForwardOptions, LogitRows};
use crate::tensor::Tensor;

fn captured_hidden(model: &Checkpoint, prompts: &PromptSet) -> Result<Vec<Vec<Tensor>>> {
    prompts.check_vocab(model.config.vocab_size)?;
    prompts
        .prompts
        .par_iter()
        .map(|p| {
            let out = forward_with(
                model,
                p,
                &[],
                ForwardOptions {
                    capture: true,
                    logits: LogitRows::Last,
                },
            )?;
            Ok(out.hidden.expect("capture requested"))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiScores {
    /// Mean `1 - cos(input, output)` per layer; lower is more removable.
    pub scores: Vec<f64>,
    /// Positions skipped per layer because a hidden vector had zero norm.
    pub excluded: Vec<usize>,
}

/// Block Influence: `1 - cos(h_in, h_out)` averaged over every prompt position.
pub fn bi_scores(model: &Checkpoint, prompts: &PromptSet) -> Result<BiScores> {
    let hidden = captured_hidden(model, prompts)?;
    let l = model.config.n_layers;
    let mut sum = vec![0.0f64; l];
    let mut count = vec![0usize; l];
    let mut excluded = vec![0usize; l];
    for h in &hidden {
        for k in 0..l {
            let (a, b) = (&h[k], &h[k + 1]);
            for t in 0..a.rows() {
                match cosine(a.row(t), b.row(t)) {
                    Some(c) => {
                        sum[k] += 1.0 - c;
                        count[k] += 1;
                    }
                    None => excluded[k] += 1,
                }
            }
        }
    }
    if let Some(k) = count.iter().position(|&c| c == 0) {
        return Err(Error::Domain(format!("layer {k}: every position has a zero-norm hidden state")));
    }
    Ok(BiScores {
        scores: sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect(),
        excluded,
    })
}

fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((ab / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

/// Statistics of the unbiased HSIC estimator for linear kernels, computed in
/// feature space so no `n x n` Gram matrix is formed.
struct Moments {
    n: usize,
    sq_norms: Vec<f64>,
    /// `(K~ 1)_a = x_a . sum(x) - |x_a|^2`.
    row_sums: Vec<f64>,
    total: f64,
}

impl Moments {
    fn new(x: &Tensor) -> Self {
        let n = x.rows();
        let d = x.cols();
        let mut s = vec![0.0f64; d];
        for a in 0..n {
            for (acc, &v) in s.iter_mut().zip(x.row(a)) {
                *acc += v as f64;
            }
        }
        let sq_norms: Vec<f64> = (0..n).map(|a| x.row(a).iter().map(|&v| (v as f64).powi(2)).sum()).collect();
        let row_sums: Vec<f64> = (0..n)
            .map(|a| x.row(a).iter().zip(&s).map(|(&v, &m)| v as f64 * m).sum::<f64>() - sq_norms[a])
            .collect();
        let total = s.iter().map(|v| v * v).sum::<f64>() - sq_norms.iter().sum::<f64>();
        Self {
            n,
            sq_norms,
            row_sums,
            total,
        }
    }
}

/// `|X^T Y|_F^2`.
fn cross_frobenius(x: &Tensor, y: &Tensor) -> f64 {
    let (dx, dy) = (x.cols(), y.cols());
    let mut c = vec![0.0f64; dx * dy];
    for a in 0..x.rows() {
        let yr = y.row(a);
        for (p, &xv) in x.row(a).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = &mut c[p * dy..(p + 1) * dy];
            for (acc, &yv) in row.iter_mut().zip(yr) {
                *acc += xv as f64 * yv as f64;
            }
        }
    }
    c.iter().map(|v| v * v).sum()
}

fn hsic(x: &Tensor, mx: &Moments, y: &Tensor, my: &Moments) -> f64 {
    let n = mx.n as f64;
    let tr = cross_frobenius(x, y) - mx.sq_norms.iter().zip(&my.sq_norms).map(|(a, b)| a * b).sum::<f64>();
    let cross: f64 = mx.row_sums.iter().zip(&my.row_sums).map(|(a, b)| a * b).sum();
    (tr + mx.total * my.total / ((n - 1.0) * (n - 2.0)) - 2.0 / (n - 2.0) * cross) / (n * (n - 3.0))
}

/// Linear CKA with the unbiased HSIC estimator between representations
/// `x: [n, dx]` and `y: [n, dy]` of the same `n` samples. `None` when either
/// side is degenerate (non-positive self-similarity).
pub fn linear_cka(x: &Tensor, y: &Tensor) -> Result<Option<f64>> {
    if x.rows() != y.rows() {
        return Err(Error::Dimension(format!("CKA over {} and {} samples", x.rows(), y.rows())));
    }
    if x.rows() < 4 {
        return Err(Error::Domain(format!("unbiased CKA needs >= 4 samples, got {}", x.rows())));
    }
    let (mx, my) = (Moments::new(x), Moments::new(y));
    let kl = hsic(x, &mx, y, &my);
    let kk = hsic(x, &mx, x, &mx);
    let ll = hsic(y, &my, y, &my);
    if !(kk > 0.0 && ll > 0.0) || !kl.is_finite() {
        return Ok(None);
    }
    Ok(Some(kl / (kk * ll).sqrt()))
}

/// The same estimator written directly over explicit Gram matrices. Quadratic
/// in `n`; useful as a cross-check on small inputs.
pub fn linear_cka_gram(x: &Tensor, y: &Tensor) -> Option<f64> {
    let n = x.rows();
    let gram = |m: &Tensor| -> Vec<f64> {
        let mut g = vec![0.0; n * n];
        for a in 0..n {
            for b in 0..n {
                if a != b {
                    g[a * n + b] = m.row(a).iter().zip(m.row(b)).map(|(&p, &q)| p as f64 * q as f64).sum();
                }
            }
        }
        g
    };
    let h = |k: &[f64], l: &[f64]| {
        let nf = n as f64;
        let tr: f64 = k.iter().zip(l).map(|(a, b)| a * b).sum();
        let sk: f64 = k.iter().sum();
        let sl: f64 = l.iter().sum();
        let mut cross = 0.0;
        for a in 0..n {
            let ka: f64 = k[a * n..(a + 1) * n].iter().sum();
            let la: f64 = l[a * n..(a + 1) * n].iter().sum();
            cross += ka * la;
        }
        (tr + sk * sl / ((nf - 1.0) * (nf - 2.0)) - 2.0 / (nf - 2.0) * cross) / (nf * (nf - 3.0))
    };
    let (k, l) = (gram(x), gram(y));
    let (kl, kk, ll) = (h(&k, &l), h(&k, &k), h(&l, &l));
    (kk > 0.0 && ll > 0.0).then(|| kl / (kk * ll).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaScores {
    /// CKA between the outputs of layers `k` and `k + 1`.
    pub adjacent: Vec<Option<f64>>,
    /// Per layer, the larger of its two adjacent CKAs; higher is more
    /// removable.
    pub similarity: Vec<Option<f64>>,
    /// Layers whose every adjacent CKA was degenerate.
    pub flagged: Vec<usize>,
}

impl CkaScores {
    /// `1 - similarity`, so that lower means more removable; flagged layers
    /// sort last.
    pub fn removal_scores(&self) -> Vec<f64> {
        self.similarity.iter().map(|s| s.map_or(f64::INFINITY, |v| 1.0 - v)).collect()
    }
}

/// Adjacent-layer linear CKA over token positions pooled across prompts.
pub fn cka_adjacent(model: &Checkpoint, prompts: &PromptSet) -> Result<CkaScores> {
    let hidden = captured_hidden(model, prompts)?;
    let l = model.config.n_layers;
    let d = model.config.d_model;
    // Output of layer k is hidden[k + 1].
    let pooled: Vec<Tensor> = (1..=l)
        .map(|k| {
            let data: Vec<f32> = hidden.iter().flat_map(|h| h[k].data().iter().copied()).collect();
            Tensor::new(vec![data.len() / d, d], data)
        })
        .collect::<Result<_>>()?;
    let adjacent = (0..l.saturating_sub(1))
        .into_par_iter()
        .map(|k| linear_cka(&pooled[k], &pooled[k + 1]))
        .collect::<Result<Vec<_>>>()?;
    let similarity: Vec<Option<f64>> = (0..l)
        .map(|k| {
            let left = k.checked_sub(1).and_then(|p| adjacent[p]);
            let right = adjacent.get(k).copied().flatten();
            match (left, right) {
                (Some(a), Some(b)) => Some(a.max(b)),
                (a, b) => a.or(b),
            }
        })
        .collect();
    let flagged = similarity.iter().enumerate().filter(|(_, s)| s.is_none()).map(|(k, _)| k).collect();
    Ok(CkaScores {
        adjacent,
        similarity,
        flagged,
    })
}
