use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::stats::{rank_correlation, RankKind};
use crate::error::{Error, Result};
use crate::metrics::{DistanceMatrix, DistanceProbe, Positions, PromptSet, Protocol};
use crate::model::Checkpoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub size: usize,
    pub spearman: Option<f64>,
    pub kendall: Option<f64>,
    pub top_k: usize,
    /// How many of the full set's `top_k` closest pairs the subset also ranks
    /// in its `top_k`.
    pub top_k_overlap: usize,
    /// Largest `|d_subset - d_full| / d_full` over pairs with `d_full > 0`.
    pub max_rel_deviation: f64,
    pub prompt_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTable {
    pub model_id: String,
    pub protocol: Protocol,
    pub total_prompts: usize,
    pub seed: u64,
    pub pairs: Vec<(usize, usize)>,
    pub full_distances: Vec<f64>,
    pub rows: Vec<StabilityRow>,
}

impl StabilityTable {
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from("size,spearman,kendall,top_k,top_k_overlap,max_rel_deviation\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{:.6}\n",
                r.size,
                f(r.spearman),
                f(r.kendall),
                r.top_k,
                r.top_k_overlap,
                r.max_rel_deviation
            ));
        }
        s
    }
}

fn distance_on(matrix: &DistanceMatrix, idx: &[usize]) -> Result<Vec<f64>> {
    matrix
        .records
        .iter()
        .map(|r| {
            if r.prompts_ij.is_empty() || r.prompts_ji.is_empty() {
                return Err(Error::NonFinite(format!("pair ({}, {}) is flagged", r.i, r.j)));
            }
            let mean = |v: &[f64]| idx.iter().map(|&k| v[k]).sum::<f64>() / idx.len() as f64;
            Ok(mean(&r.prompts_ij).max(mean(&r.prompts_ji)))
        })
        .collect()
}

fn top_k(d: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Re-ranks the pairs of `matrix` on seeded prompt subsets, reusing the
/// per-prompt KLs already stored in its records.
pub fn stability_from_matrix(matrix: &DistanceMatrix, sizes: &[usize], top: usize, seed: u64) -> Result<StabilityTable> {
    let total = matrix.records.first().map_or(0, |r| r.prompts_ij.len());
    if total == 0 {
        return Err(Error::Domain("distance matrix carries no per-prompt values".into()));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > total) {
        return Err(Error::Domain(format!("subset size {s} not in 1..={total}")));
    }
    let all: Vec<usize> = (0..total).collect();
    let full = distance_on(matrix, &all)?;
    let k = top.min(full.len());
    let full_top = top_k(&full, k);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows = sizes
        .iter()
        .map(|&size| {
            let mut idx = rand::seq::index::sample(&mut rng, total, size).into_vec();
            idx.sort_unstable();
            let sub = distance_on(matrix, &idx)?;
            let sub_top = top_k(&sub, k);
            let overlap = sub_top.iter().filter(|p| full_top.contains(p)).count();
            let max_rel = full
                .iter()
                .zip(&sub)
                .filter(|(f, _)| **f > 0.0)
                .map(|(f, s)| (s - f).abs() / f)
                .fold(0.0, f64::max);
            Ok(StabilityRow {
                size,
                spearman: rank_correlation(&full, &sub, RankKind::Spearman).ok(),
                kendall: rank_correlation(&full, &sub, RankKind::Kendall).ok(),
                top_k: k,
                top_k_overlap: overlap,
                max_rel_deviation: max_rel,
                prompt_indices: idx,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StabilityTable {
        model_id: matrix.model_id.clone(),
        protocol: matrix.protocol,
        total_prompts: total,
        seed,
        pairs: matrix.pairs(),
        full_distances: full,
        rows,
    })
}

/// Pair-ranking stability across prompt subsets of the requested sizes.
#[allow(clippy::too_many_arguments)]
pub fn prompt_stability(
    model: &Checkpoint,
    pairs: &[(usize, usize)],
    protocol: Protocol,
    prompts: &PromptSet,
    positions: Positions,
    sizes: &[usize],
    top: usize,
    seed: u64,
) -> Result<StabilityTable> {
    if let Some(&s) = sizes.iter().find(|&&s| s > prompts.len()) {
        return Err(Error::Domain(format!("subset size {s} exceeds the {} prompts", prompts.len())));
    }
    let probe = DistanceProbe::new(model, prompts, positions)?;
    let matrix = probe.sweep_pairs(pairs, protocol, "stability".into())?;
    stability_from_matrix(&matrix, sizes, top, seed)
}
