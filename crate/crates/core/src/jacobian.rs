//! Spectral norms of residual-block Jacobians by finite-difference power
//! iteration.
//!
//! The probed map is the residual update `g(x) = block(x) - x` at the last
//! token. `Jv` is a central difference along `v`; `J^T u` is the gradient of
//! the scalar `u . g(x)`, taken by central differences along each coordinate.
//! Power iteration on `J^T J` then needs no access to the block's internals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::PromptSet;
use crate::model::{forward_with, BlockProbe, Checkpoint, ForwardOptions, LogitRows};

/// A map `g: R^d -> R^d` probed around a fixed point.
pub trait ResidualMap: Sync {
    fn point(&self) -> &[f32];
    fn residual(&self, x: &[f32]) -> Result<Vec<f32>>;
    fn dim(&self) -> usize {
        self.point().len()
    }
}

impl ResidualMap for BlockProbe<'_> {
    fn point(&self) -> &[f32] {
        BlockProbe::point(self)
    }

    fn residual(&self, x: &[f32]) -> Result<Vec<f32>> {
        BlockProbe::residual(self, x)
    }
}

/// `g(x) = A x` for a dense row-major `A`.
#[derive(Debug, Clone)]
pub struct LinearResidual {
    pub matrix: Vec<f32>,
    pub x0: Vec<f32>,
}

impl LinearResidual {
    pub fn new(matrix: Vec<f32>, x0: Vec<f32>) -> Result<Self> {
        if matrix.len() != x0.len() * x0.len() {
            return Err(Error::Dimension(format!(
                "{} matrix entries for dimension {}",
                matrix.len(),
                x0.len()
            )));
        }
        Ok(Self { matrix, x0 })
    }
}

impl ResidualMap for LinearResidual {
    fn point(&self) -> &[f32] {
        &self.x0
    }

    fn residual(&self, x: &[f32]) -> Result<Vec<f32>> {
        let d = self.x0.len();
        Ok((0..d)
            .map(|r| self.matrix[r * d..(r + 1) * d].iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    pub iterations: usize,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self {
            iterations: 20,
            epsilon: 1e-3,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerEstimate {
    /// `None` when the differences stayed non-finite after the retry.
    pub sigma: Option<f64>,
    /// Rayleigh estimate after each iteration.
    pub trace: Vec<f64>,
    pub epsilon: f64,
    pub retried: bool,
}

fn shifted(x0: &[f32], v: &[f64], h: f64) -> Vec<f32> {
    x0.iter().zip(v).map(|(&x, &d)| (x as f64 + h * d) as f32).collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `J v` by a central difference.
fn jvp(g: &dyn ResidualMap, v: &[f64], eps: f64) -> Result<Vec<f64>> {
    let x0 = g.point();
    let plus = g.residual(&shifted(x0, v, eps))?;
    let minus = g.residual(&shifted(x0, v, -eps))?;
    Ok(plus.iter().zip(&minus).map(|(&a, &b)| (a as f64 - b as f64) / (2.0 * eps)).collect())
}

/// `J^T u`: per coordinate, the central difference of `u . g`.
fn vjp(g: &dyn ResidualMap, u: &[f64], eps: f64) -> Result<Vec<f64>> {
    let x0 = g.point();
    let dot = |y: Vec<f32>| y.iter().zip(u).map(|(&a, &b)| a as f64 * b).sum::<f64>();
    (0..x0.len())
        .map(|c| {
            let mut xp = x0.to_vec();
            let mut xm = x0.to_vec();
            xp[c] = (x0[c] as f64 + eps) as f32;
            xm[c] = (x0[c] as f64 - eps) as f32;
            let h = (xp[c] as f64 - xm[c] as f64) / 2.0;
            Ok((dot(g.residual(&xp)?) - dot(g.residual(&xm)?)) / (2.0 * h))
        })
        .collect()
}

fn power_once(g: &dyn ResidualMap, cfg: &PowerConfig, eps: f64) -> Result<(f64, Vec<f64>)> {
    let d = g.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let n0 = norm(&v);
    v.iter_mut().for_each(|x| *x /= n0);
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut sigma = 0.0;
    for _ in 0..cfg.iterations.max(1) {
        let w = jvp(g, &v, eps)?;
        let nw = norm(&w);
        if !nw.is_finite() || nw == 0.0 {
            sigma = nw;
            trace.push(sigma);
            break;
        }
        let u = vjp(g, &w, eps)?;
        let nu = norm(&u);
        // Rayleigh quotient of J J^T at w: |J^T w| / |w|.
        sigma = nu / nw;
        trace.push(sigma);
        if !nu.is_finite() {
            sigma = f64::NAN;
            break;
        }
        if nu == 0.0 {
            break;
        }
        v = u.into_iter().map(|x| x / nu).collect();
    }
    Ok((sigma, trace))
}

/// Largest singular value of the Jacobian of `g` at its probe point.
pub fn power_iteration(g: &dyn ResidualMap, cfg: &PowerConfig) -> Result<PowerEstimate> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Domain(format!("epsilon must be positive, got {}", cfg.epsilon)));
    }
    let (sigma, trace) = power_once(g, cfg, cfg.epsilon)?;
    if sigma.is_finite() {
        return Ok(PowerEstimate {
            sigma: Some(sigma),
            trace,
            epsilon: cfg.epsilon,
            retried: false,
        });
    }
    let eps = cfg.epsilon * 10.0;
    let (sigma, trace) = power_once(g, cfg, eps)?;
    Ok(PowerEstimate {
        sigma: sigma.is_finite().then_some(sigma),
        trace,
        epsilon: eps,
        retried: true,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianRow {
    pub layer: usize,
    pub mean: Option<f64>,
    pub max: Option<f64>,
    pub min: Option<f64>,
    pub per_prompt: Vec<Option<f64>>,
    /// Relative change of the estimate over the last iteration, per prompt.
    pub convergence: Vec<Option<f64>>,
    pub flagged_prompts: Vec<usize>,
    pub iterations: usize,
    pub epsilon: f64,
    /// Left blank for the user to fill in.
    pub region: String,
}

/// Spectral norm of layer `layer`'s residual update at the last token of
/// each prompt.
pub fn residual_jacobian_norm(
    model: &Checkpoint,
    layer: usize,
    prompts: &PromptSet,
    cfg: &PowerConfig,
) -> Result<JacobianRow> {
    if layer >= model.config.n_layers {
        return Err(Error::Spec(format!(
            "layer {layer} out of range for {} layers",
            model.config.n_layers
        )));
    }
    prompts.check_vocab(model.config.vocab_size)?;
    let estimates = prompts
        .prompts
        .par_iter()
        .enumerate()
        .map(|(k, p)| {
            let out = forward_with(
                model,
                p,
                &[],
                ForwardOptions {
                    capture: true,
                    logits: LogitRows::Last,
                },
            )?;
            let hidden = out.hidden.expect("capture requested");
            let probe = BlockProbe::new(model, layer, &hidden[layer], true)?;
            let pc = PowerConfig {
                seed: cfg.seed.wrapping_add(k as u64),
                ..*cfg
            };
            power_iteration(&probe, &pc)
        })
        .collect::<Result<Vec<_>>>()?;
    let per_prompt: Vec<Option<f64>> = estimates.iter().map(|e| e.sigma).collect();
    let finite: Vec<f64> = per_prompt.iter().flatten().copied().collect();
    let convergence = estimates
        .iter()
        .map(|e| match e.trace.as_slice() {
            [.., a, b] if *b > 0.0 => Some((b - a).abs() / b),
            _ => None,
        })
        .collect();
    Ok(JacobianRow {
        layer,
        mean: (!finite.is_empty()).then(|| finite.iter().sum::<f64>() / finite.len() as f64),
        max: finite.iter().copied().reduce(f64::max),
        min: finite.iter().copied().reduce(f64::min),
        per_prompt,
        convergence,
        flagged_prompts: estimates
            .iter()
            .enumerate()
            .filter(|(_, e)| e.sigma.is_none())
            .map(|(k, _)| k)
            .collect(),
        iterations: cfg.iterations,
        epsilon: cfg.epsilon,
        region: String::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JacobianReport {
    pub model_id: String,
    pub prompt_provenance: String,
    pub config: PowerConfig,
    pub rows: Vec<JacobianRow>,
}

impl JacobianReport {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("layer,mean,max,min,region\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.layer, f(r.mean), f(r.max), f(r.min), r.region));
        }
        s
    }
}

pub fn jacobian_report(
    model: &Checkpoint,
    layers: &[usize],
    prompts: &PromptSet,
    cfg: &PowerConfig,
) -> Result<JacobianReport> {
    let rows = layers
        .iter()
        .map(|&l| residual_jacobian_norm(model, l, prompts, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(JacobianReport {
        model_id: model.config.model_id(),
        prompt_provenance: prompts.provenance.clone(),
        config: *cfg,
        rows,
    })
}
