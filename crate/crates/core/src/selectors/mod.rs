//! Turning per-layer scores into removal sets.

mod repr;
mod search;

pub use repr::{bi_scores, cka_adjacent, linear_cka, linear_cka_gram, BiScores, CkaScores};
pub use search::{
    beam_select, budget_sweep, sleb_select, BudgetLedger, BudgetRow, ContractOracle, LedgerEntry, PplOracle,
    SlebVariant, SweepMethod,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::DistanceMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Only adjacent partners `i - 1` and `i + 1`.
    MinNeighbor,
    MinAny,
}

/// `s(i)`: the smallest distance from layer `i` to any admitted partner.
/// Flagged pairs are skipped.
pub fn layer_scores_from_pairs(matrix: &DistanceMatrix, mode: ScoreMode) -> Result<Vec<f64>> {
    let mut s = vec![f64::INFINITY; matrix.n_layers];
    for r in &matrix.records {
        if mode == ScoreMode::MinNeighbor && r.i.abs_diff(r.j) != 1 {
            continue;
        }
        if let Some(d) = r.distance() {
            s[r.i] = s[r.i].min(d);
            s[r.j] = s[r.j].min(d);
        }
    }
    if let Some(l) = s.iter().position(|v| v.is_infinite()) {
        return Err(Error::Spec(format!("layer {l} has no scored partner in the distance matrix")));
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub budget: Option<usize>,
    pub consumed: usize,
}

/// A selector's chosen layers plus its accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub method: String,
    /// Requested number of layers.
    pub n: usize,
    /// Chosen layers, ascending.
    pub layers: Vec<usize>,
    /// The same layers in the order they were accepted.
    pub order: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spacing: Option<usize>,
    pub evaluator_calls: usize,
    /// Fewer than `n` layers could be chosen.
    pub shortfall: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub ppl: Option<f64>,
    pub baseline_ppl: Option<f64>,
    pub delta_ppl_pct: Option<f64>,
    pub contract_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<LedgerSummary>,
}

impl SelectionResult {
    pub fn new(method: impl Into<String>, n: usize, order: Vec<usize>) -> Self {
        let mut layers = order.clone();
        layers.sort_unstable();
        Self {
            method: method.into(),
            n,
            shortfall: order.len() < n,
            layers,
            order,
            scores: None,
            spacing: None,
            evaluator_calls: 0,
            seed: None,
            ppl: None,
            baseline_ppl: None,
            delta_ppl_pct: None,
            contract_id: None,
            ledger: None,
        }
    }

    /// Whether every pair of chosen layers is more than `spacing` apart.
    pub fn respects_spacing(&self, spacing: usize) -> bool {
        self.layers.windows(2).all(|w| w[1] - w[0] > spacing)
    }

    /// Fills in PPL and ΔPPL% from `evaluator` against its own empty-removal
    /// baseline.
    pub fn evaluate(&mut self, evaluator: &dyn PplOracle, baseline_ppl: f64) -> Result<()> {
        let ppl = evaluator.ppl(&self.layers)?;
        self.ppl = Some(ppl);
        self.baseline_ppl = Some(baseline_ppl);
        self.delta_ppl_pct = Some((ppl / baseline_ppl - 1.0) * 100.0);
        self.contract_id = Some(evaluator.contract_id());
        Ok(())
    }
}

/// Greedy spacing-constrained selection restricted to `allowed` layers.
pub fn greedy_select_in(s: &[f64], n: usize, spacing: usize, allowed: impl Fn(usize) -> bool) -> SelectionResult {
    let mut order: Vec<usize> = (0..s.len()).filter(|&l| allowed(l)).collect();
    order.sort_by(|&a, &b| s[a].total_cmp(&s[b]).then(a.cmp(&b)));
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    for l in order {
        if chosen.len() == n {
            break;
        }
        if chosen.iter().all(|&k| l.abs_diff(k) > spacing) {
            chosen.push(l);
        }
    }
    let mut r = SelectionResult::new("greedy", n, chosen);
    r.scores = Some(s.to_vec());
    r.spacing = Some(spacing);
    r
}

/// Scans layers by ascending score and accepts a layer when it is more than
/// `spacing` away from every layer already accepted. Ties go to the lower
/// index.
pub fn greedy_select(s: &[f64], n: usize, spacing: usize) -> SelectionResult {
    greedy_select_in(s, n, spacing, |_| true)
}

/// Largest number of layers out of `n_layers` that can be more than
/// `spacing` apart.
pub fn max_spaced(n_layers: usize, spacing: usize) -> usize {
    n_layers.div_ceil(spacing + 1)
}

/// Uniform draw over all `n`-subsets of `0..n_layers` whose members are more
/// than `spacing` apart.
///
/// Such sets are in bijection with plain `n`-subsets of
/// `0..n_layers - spacing * (n - 1)` (subtract `k * spacing` from the
/// `k`-th smallest member), so a uniform plain subset maps to a uniform
/// valid set without rejection.
pub fn random_select(n_layers: usize, n: usize, spacing: usize, seed: u64) -> Result<SelectionResult> {
    if n > max_spaced(n_layers, spacing) {
        return Err(Error::Spec(format!(
            "no set of {n} layers out of {n_layers} is more than {spacing} apart"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = n_layers - spacing * n.saturating_sub(1);
    let mut base = rand::seq::index::sample(&mut rng, pool, n).into_vec();
    base.sort_unstable();
    let layers: Vec<usize> = base.iter().enumerate().map(|(k, &y)| y + k * spacing).collect();
    let mut r = SelectionResult::new("random", n, layers);
    r.spacing = Some(spacing);
    r.seed = Some(seed);
    Ok(r)
}
