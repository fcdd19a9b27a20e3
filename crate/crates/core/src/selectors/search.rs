//! Perplexity-driven selection under an evaluator-call budget.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{LedgerSummary, SelectionResult};
use crate::corpus::TokenCorpus;
use crate::error::{Error, Result};
use crate::evaluator::{sliding_window_ppl, EvalContract};
use crate::model::{Checkpoint, InterventionSpec};

/// Perplexity of a model with a set of layers removed.
pub trait PplOracle: Sync {
    fn n_layers(&self) -> usize;
    fn contract_id(&self) -> String;
    fn ppl(&self, removed: &[usize]) -> Result<f64>;
}

/// Sliding-window perplexity under a pinned contract. Removing every layer
/// scores as infinite perplexity.
pub struct ContractOracle<'a> {
    pub model: &'a Checkpoint,
    pub corpus: &'a TokenCorpus,
    pub contract: &'a EvalContract,
}

impl PplOracle for ContractOracle<'_> {
    fn n_layers(&self) -> usize {
        self.model.config.n_layers
    }

    fn contract_id(&self) -> String {
        self.contract.id()
    }

    fn ppl(&self, removed: &[usize]) -> Result<f64> {
        if removed.len() >= self.n_layers() {
            return Ok(f64::INFINITY);
        }
        let ivs: Vec<InterventionSpec> = if removed.is_empty() {
            Vec::new()
        } else {
            vec![InterventionSpec::delete(removed.iter().copied())]
        };
        Ok(sliding_window_ppl(self.model, self.corpus, self.contract, &ivs)?.ppl)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub step: String,
    pub candidate: Vec<usize>,
    /// `None` when the evaluation went non-finite.
    pub ppl: Option<f64>,
}

/// Append-only account of full-evaluator calls against a budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    budget: Option<usize>,
    consumed: usize,
    log: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn new(budget: usize) -> Self {
        Self {
            budget: Some(budget),
            consumed: 0,
            log: Vec::new(),
        }
    }

    pub fn unlimited() -> Self {
        Self {
            budget: None,
            consumed: 0,
            log: Vec::new(),
        }
    }

    pub fn budget(&self) -> Option<usize> {
        self.budget
    }

    pub fn consumed(&self) -> usize {
        self.consumed
    }

    pub fn remaining(&self) -> Option<usize> {
        self.budget.map(|b| b - self.consumed)
    }

    pub fn fits(&self, calls: usize) -> bool {
        self.remaining().is_none_or(|r| calls <= r)
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.log
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            budget: self.budget,
            consumed: self.consumed,
        }
    }

    /// Evaluates every candidate (concurrently) after checking that all of
    /// them fit the budget, then appends them to the log in order. Non-finite
    /// evaluations come back as `+inf`.
    pub fn charge_batch(&mut self, step: &str, candidates: &[Vec<usize>], oracle: &dyn PplOracle) -> Result<Vec<f64>> {
        if !self.fits(candidates.len()) {
            return Err(Error::BudgetExhausted {
                budget: self.budget.unwrap_or(usize::MAX),
                consumed: self.consumed,
            });
        }
        let ppls = candidates
            .par_iter()
            .map(|c| match oracle.ppl(c) {
                Ok(p) if p.is_finite() => Ok(p),
                Ok(_) | Err(Error::NonFinite(_)) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            })
            .collect::<Result<Vec<f64>>>()?;
        for (c, &p) in candidates.iter().zip(&ppls) {
            self.consumed += 1;
            self.log.push(LedgerEntry {
                step: step.to_string(),
                candidate: c.clone(),
                ppl: p.is_finite().then_some(p),
            });
        }
        Ok(ppls)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlebVariant {
    /// Score every layer once by single-removal PPL and take the best `n`.
    Greedy,
    /// Re-score the remaining layers after each committed removal.
    Iterative,
}

fn argmin(ppls: &[f64]) -> usize {
    (0..ppls.len())
        .min_by(|&a, &b| ppls[a].total_cmp(&ppls[b]).then(a.cmp(&b)))
        .expect("nonempty")
}

/// Perplexity-based block elimination. A scoring step runs only when all of
/// its calls fit the ledger; otherwise selection stops with a shortfall.
pub fn sleb_select(
    oracle: &dyn PplOracle,
    n: usize,
    variant: SlebVariant,
    ledger: &mut BudgetLedger,
) -> Result<SelectionResult> {
    let l = oracle.n_layers();
    let target = n.min(l);
    let start = ledger.consumed();
    let mut order = Vec::new();
    match variant {
        SlebVariant::Greedy => {
            if target > 0 && ledger.fits(l) {
                let cands: Vec<Vec<usize>> = (0..l).map(|k| vec![k]).collect();
                let ppls = ledger.charge_batch("sleb-greedy", &cands, oracle)?;
                let mut idx: Vec<usize> = (0..l).collect();
                idx.sort_by(|&a, &b| ppls[a].total_cmp(&ppls[b]).then(a.cmp(&b)));
                order = idx[..target].to_vec();
            }
        }
        SlebVariant::Iterative => {
            while order.len() < target {
                let remaining: Vec<usize> = (0..l).filter(|k| !order.contains(k)).collect();
                if !ledger.fits(remaining.len()) {
                    break;
                }
                let cands: Vec<Vec<usize>> = remaining
                    .iter()
                    .map(|&k| {
                        let mut c = order.clone();
                        c.push(k);
                        c.sort_unstable();
                        c
                    })
                    .collect();
                let ppls = ledger.charge_batch(&format!("sleb-iterative:{}", order.len() + 1), &cands, oracle)?;
                order.push(remaining[argmin(&ppls)]);
            }
        }
    }
    let method = match variant {
        SlebVariant::Greedy => "sleb-greedy",
        SlebVariant::Iterative => "sleb-iterative",
    };
    let mut r = SelectionResult::new(method, n, order);
    r.evaluator_calls = ledger.consumed() - start;
    r.ledger = Some(ledger.summary());
    Ok(r)
}

/// Beam search over removal sets.
///
/// The first beam holds the `seeds` layers with the lowest `scores`
/// (typically interchange-distance layer scores). Each step extends every
/// beam set by every layer not already in it, evaluates the distinct new
/// sets with the oracle (repeats are served from a cache at no cost) and
/// keeps the `width` lowest-PPL sets. Returns the best set for each size
/// completed before `n_max` or budget exhaustion.
pub fn beam_select(
    oracle: &dyn PplOracle,
    scores: &[f64],
    n_max: usize,
    width: usize,
    seeds: usize,
    ledger: &mut BudgetLedger,
) -> Result<Vec<SelectionResult>> {
    let l = oracle.n_layers();
    if width == 0 || seeds == 0 {
        return Err(Error::Domain("beam width and seed count must be >= 1".into()));
    }
    if scores.len() != l {
        return Err(Error::Dimension(format!("{} scores for {l} layers", scores.len())));
    }
    let start = ledger.consumed();
    let mut cache: HashMap<Vec<usize>, f64> = HashMap::new();
    let mut results = Vec::new();
    let mut seed_layers: Vec<usize> = (0..l).collect();
    seed_layers.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    seed_layers.truncate(seeds);

    let mut beam: Vec<Vec<usize>> = Vec::new();
    for size in 1..=n_max.min(l) {
        let candidates: Vec<Vec<usize>> = if size == 1 {
            seed_layers.iter().map(|&k| vec![k]).collect()
        } else {
            let mut set = BTreeSet::new();
            for b in &beam {
                for k in (0..l).filter(|k| !b.contains(k)) {
                    let mut c = b.clone();
                    c.push(k);
                    c.sort_unstable();
                    set.insert(c);
                }
            }
            set.into_iter().collect()
        };
        let fresh: Vec<Vec<usize>> = candidates.iter().filter(|c| !cache.contains_key(*c)).cloned().collect();
        if !ledger.fits(fresh.len()) {
            break;
        }
        let ppls = ledger.charge_batch(&format!("beam:{size}"), &fresh, oracle)?;
        cache.extend(fresh.into_iter().zip(ppls));
        let mut ranked: Vec<(f64, Vec<usize>)> = candidates.into_iter().map(|c| (cache[&c], c)).collect();
        ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        ranked.truncate(width);
        beam = ranked.into_iter().map(|(_, c)| c).collect();
        let mut r = SelectionResult::new("beam", size, beam[0].clone());
        r.evaluator_calls = ledger.consumed() - start;
        r.ledger = Some(ledger.summary());
        results.push(r);
    }
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SweepMethod {
    SlebGreedy,
    SlebIterative,
    Beam { width: usize, seeds: usize },
}

impl std::fmt::Display for SweepMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SweepMethod::SlebGreedy => f.write_str("sleb-greedy"),
            SweepMethod::SlebIterative => f.write_str("sleb-iterative"),
            SweepMethod::Beam { width, seeds } => write!(f, "beam-w{width}-s{seeds}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub method: String,
    pub budget: usize,
    pub evals_used: usize,
    pub layers_removed: usize,
    pub layers: Vec<usize>,
    pub ppl: f64,
    pub baseline_ppl: f64,
    pub delta_ppl_pct: f64,
    pub contract_id: String,
}

impl BudgetRow {
    pub fn csv_header() -> &'static str {
        "method,budget,evals_used,layers_removed,layers,ppl,baseline_ppl,delta_ppl_pct,contract_id"
    }

    pub fn csv_row(&self) -> String {
        let layers: Vec<String> = self.layers.iter().map(ToString::to_string).collect();
        format!(
            "{},{},{},{},{},{:.6},{:.6},{:.4},{}",
            self.method,
            self.budget,
            self.evals_used,
            self.layers_removed,
            layers.join(" "),
            self.ppl,
            self.baseline_ppl,
            self.delta_ppl_pct,
            self.contract_id
        )
    }
}

/// Runs each method under each budget with a fresh ledger, selecting with
/// `oracle` and reporting the final set's PPL under `evaluator` (uncharged).
pub fn budget_sweep(
    methods: &[SweepMethod],
    budgets: &[usize],
    n_max: usize,
    oracle: &dyn PplOracle,
    evaluator: &dyn PplOracle,
    scores: Option<&[f64]>,
) -> Result<Vec<BudgetRow>> {
    let baseline = evaluator.ppl(&[])?;
    let mut rows = Vec::new();
    for &m in methods {
        for &b in budgets {
            let mut ledger = BudgetLedger::new(b);
            let layers = match m {
                SweepMethod::SlebGreedy => sleb_select(oracle, n_max, SlebVariant::Greedy, &mut ledger)?.layers,
                SweepMethod::SlebIterative => {
                    sleb_select(oracle, n_max, SlebVariant::Iterative, &mut ledger)?.layers
                }
                SweepMethod::Beam { width, seeds } => {
                    let s = scores.ok_or_else(|| Error::Config("beam search needs layer scores".into()))?;
                    beam_select(oracle, s, n_max, width, seeds, &mut ledger)?
                        .pop()
                        .map(|r| r.layers)
                        .unwrap_or_default()
                }
            };
            let ppl = if layers.is_empty() { baseline } else { evaluator.ppl(&layers)? };
            rows.push(BudgetRow {
                method: m.to_string(),
                budget: b,
                evals_used: ledger.consumed(),
                layers_removed: layers.len(),
                layers,
                ppl,
                baseline_ppl: baseline,
                delta_ppl_pct: (ppl / baseline - 1.0) * 100.0,
                contract_id: evaluator.contract_id(),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// PPL is 10 plus the sum of per-layer costs, with a penalty for removing
    /// adjacent layers together.
    struct Additive(Vec<f64>);

    impl PplOracle for Additive {
        fn n_layers(&self) -> usize {
            self.0.len()
        }
        fn contract_id(&self) -> String {
            "toy".into()
        }
        fn ppl(&self, removed: &[usize]) -> Result<f64> {
            let mut p = 10.0 + removed.iter().map(|&k| self.0[k]).sum::<f64>();
            for w in removed.windows(2) {
                if w[1] == w[0] + 1 {
                    p += 100.0;
                }
            }
            Ok(p)
        }
    }

    #[test]
    fn ledger_refuses_overdraft() {
        let o = Additive(vec![1.0, 2.0]);
        let mut l = BudgetLedger::new(1);
        assert!(l.charge_batch("x", &[vec![0], vec![1]], &o).is_err());
        assert_eq!(l.consumed(), 0);
        l.charge_batch("x", &[vec![0]], &o).unwrap();
        assert_eq!(l.entries().len(), 1);
        assert!(!l.fits(1));
    }

    #[test]
    fn sleb_call_counts() {
        let o = Additive(vec![3.0, 1.0, 2.0, 4.0]);
        let mut l = BudgetLedger::unlimited();
        let r = sleb_select(&o, 2, SlebVariant::Iterative, &mut l).unwrap();
        assert_eq!(r.evaluator_calls, 7);
        assert_eq!(r.order, vec![1, 3]);
        let mut l = BudgetLedger::unlimited();
        let r = sleb_select(&o, 2, SlebVariant::Greedy, &mut l).unwrap();
        assert_eq!(r.evaluator_calls, 4);
        assert_eq!(r.order, vec![1, 2]);
    }

    #[test]
    fn sleb_stops_when_step_does_not_fit() {
        let o = Additive(vec![3.0, 1.0, 2.0, 4.0]);
        let mut l = BudgetLedger::new(6);
        let r = sleb_select(&o, 3, SlebVariant::Iterative, &mut l).unwrap();
        assert_eq!(r.order.len(), 1);
        assert!(r.shortfall);
        assert_eq!(l.consumed(), 4);
    }

    #[test]
    fn beam_width_one_is_greedy_extension() {
        let o = Additive(vec![3.0, 1.0, 2.0, 4.0, 0.5]);
        let mut l = BudgetLedger::unlimited();
        let rs = beam_select(&o, &[0.0, 1.0, 2.0, 3.0, 4.0], 3, 1, 1, &mut l).unwrap();
        assert_eq!(rs[0].layers, vec![0]);
        assert_eq!(rs[1].layers, vec![0, 4]);
        assert_eq!(rs[2].layers, vec![0, 2, 4]);
        assert_eq!(l.consumed(), l.entries().len());
    }
}
