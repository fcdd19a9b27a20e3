use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicUsize, Ordering};

use proptest::prelude::*;
use protogap_core::corpus::TokenCorpus;
use protogap_core::evaluator::{sliding_window_ppl, EvalContract};
use protogap_core::fixtures::{random_model, random_prompts, FixtureSpec};
use protogap_core::metrics::{sweep_distances, PairFilter, Positions, PromptSet, Protocol};
use protogap_core::model::InterventionSpec;
use protogap_core::selectors::{
    beam_select, bi_scores, budget_sweep, cka_adjacent, greedy_select, greedy_select_in, layer_scores_from_pairs,
    linear_cka, linear_cka_gram, max_spaced, random_select, sleb_select, BudgetLedger, ContractOracle, PplOracle,
    ScoreMode, SlebVariant, SweepMethod,
};
use protogap_core::tensor::Tensor;
use protogap_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// PPL that grows additively with each removed layer's cost; counts calls.
struct Additive {
    cost: Vec<f64>,
    calls: AtomicUsize,
}

impl Additive {
    fn new(cost: Vec<f64>) -> Self {
        Self {
            cost,
            calls: AtomicUsize::new(0),
        }
    }
}

impl PplOracle for Additive {
    fn n_layers(&self) -> usize {
        self.cost.len()
    }
    fn contract_id(&self) -> String {
        "mock:000000000000".into()
    }
    fn ppl(&self, removed: &[usize]) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(10.0 + removed.iter().map(|&l| self.cost[l]).sum::<f64>())
    }
}

/// Removing a layer matters more when its neighbour is gone too, so
/// iterative rescoring can beat one-shot scoring.
struct Interacting(Vec<f64>);

impl PplOracle for Interacting {
    fn n_layers(&self) -> usize {
        self.0.len()
    }
    fn contract_id(&self) -> String {
        "mock:111111111111".into()
    }
    fn ppl(&self, removed: &[usize]) -> Result<f64> {
        let set: BTreeSet<usize> = removed.iter().copied().collect();
        let mut p = 10.0;
        for &l in &set {
            p += self.0[l];
            if l > 0 && set.contains(&(l - 1)) {
                p += 5.0;
            }
        }
        Ok(p)
    }
}

fn random_costs(l: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..l).map(|_| rng.random_range(0.0..3.0)).collect()
}

#[test]
fn sleb_iterative_call_count() {
    let o = Additive::new(vec![1.0, 2.0, 3.0, 4.0]);
    let mut ledger = BudgetLedger::unlimited();
    let r = sleb_select(&o, 2, SlebVariant::Iterative, &mut ledger).unwrap();
    assert_eq!(o.calls.load(Ordering::SeqCst), 7);
    assert_eq!(r.evaluator_calls, 7);
    assert_eq!(ledger.consumed(), 7);
    assert_eq!(r.order, vec![0, 1]);
}

#[test]
fn sleb_greedy_scores_once() {
    let o = Additive::new(vec![4.0, 1.0, 3.0, 2.0, 5.0]);
    let mut ledger = BudgetLedger::unlimited();
    let r = sleb_select(&o, 3, SlebVariant::Greedy, &mut ledger).unwrap();
    assert_eq!(ledger.consumed(), 5);
    assert_eq!(r.order, vec![1, 3, 2]);
    assert_eq!(r.layers, vec![1, 2, 3]);
}

#[test]
fn sleb_single_layer_model() {
    let o = Additive::new(vec![1.0]);
    let mut ledger = BudgetLedger::unlimited();
    let r = sleb_select(&o, 1, SlebVariant::Iterative, &mut ledger).unwrap();
    assert_eq!(r.layers, vec![0]);
}

#[test]
fn sleb_stops_when_a_step_does_not_fit() {
    let o = Additive::new(vec![1.0, 2.0, 3.0, 4.0]);
    let mut ledger = BudgetLedger::new(6);
    let r = sleb_select(&o, 2, SlebVariant::Iterative, &mut ledger).unwrap();
    assert_eq!(ledger.consumed(), 4);
    assert_eq!(r.layers.len(), 1);
    assert!(r.shortfall);
}

#[test]
fn iterative_beats_greedy_on_interactions() {
    let o = Interacting(vec![1.0, 1.1, 3.0, 3.2, 1.2]);
    let g = sleb_select(&o, 2, SlebVariant::Greedy, &mut BudgetLedger::unlimited()).unwrap();
    let it = sleb_select(&o, 2, SlebVariant::Iterative, &mut BudgetLedger::unlimited()).unwrap();
    assert_eq!(g.layers, vec![0, 1]);
    assert_eq!(it.layers, vec![0, 4]);
    assert!(o.ppl(&it.layers).unwrap() < o.ppl(&g.layers).unwrap());
}

#[test]
fn beam_finds_additive_optimum() {
    let cost = vec![2.0, 0.5, 1.0, 0.1, 3.0, 0.7];
    let o = Additive::new(cost.clone());
    let scores = cost.clone();
    let sizes = beam_select(&o, &scores, 3, 3, 3, &mut BudgetLedger::unlimited()).unwrap();
    assert_eq!(sizes.len(), 3);
    assert_eq!(sizes[0].layers, vec![3]);
    assert_eq!(sizes[1].layers, vec![1, 3]);
    assert_eq!(sizes[2].layers, vec![1, 3, 5]);
}

#[test]
fn beam_caches_repeats() {
    let o = Additive::new(random_costs(6, 3));
    let scores = vec![0.0; 6];
    let mut ledger = BudgetLedger::unlimited();
    beam_select(&o, &scores, 3, 2, 2, &mut ledger).unwrap();
    let distinct: BTreeSet<Vec<usize>> = ledger.entries().iter().map(|e| e.candidate.clone()).collect();
    assert_eq!(distinct.len(), ledger.consumed());
    assert_eq!(o.calls.load(Ordering::SeqCst), ledger.consumed());
}

#[test]
fn ledger_never_exceeds_budget_over_grid() {
    let grid = [50, 100, 200, 400, 800];
    let methods = [
        SweepMethod::SlebGreedy,
        SweepMethod::SlebIterative,
        SweepMethod::Beam { width: 3, seeds: 3 },
        SweepMethod::Beam { width: 5, seeds: 2 },
    ];
    let o = Additive::new(random_costs(24, 4));
    let eval = Additive::new(random_costs(24, 4));
    let scores = random_costs(24, 5);
    let rows = budget_sweep(&methods, &grid, 23, &o, &eval, Some(&scores)).unwrap();
    assert_eq!(rows.len(), methods.len() * grid.len());
    for r in &rows {
        assert!(r.evals_used <= r.budget, "{r:?}");
    }
    // Selection calls are the only ones charged; the evaluator's are not.
    let charged: usize = rows.iter().map(|r| r.evals_used).sum();
    assert_eq!(o.calls.load(Ordering::SeqCst), charged);
    for b in grid {
        for m in [SlebVariant::Greedy, SlebVariant::Iterative] {
            let mut ledger = BudgetLedger::new(b);
            sleb_select(&o, 23, m, &mut ledger).unwrap();
            assert!(ledger.consumed() <= b);
        }
        let mut ledger = BudgetLedger::new(b);
        beam_select(&o, &scores, 23, 4, 4, &mut ledger).unwrap();
        assert!(ledger.consumed() <= b);
    }
}

#[test]
fn more_budget_never_hurts_sleb_iterative() {
    let o = Additive::new(random_costs(12, 6));
    let eval = Additive::new(random_costs(12, 6));
    let rows = budget_sweep(&[SweepMethod::SlebIterative], &[10, 30, 60, 100], 5, &o, &eval, None).unwrap();
    for w in rows.windows(2) {
        assert!(w[1].layers_removed >= w[0].layers_removed);
    }
}

#[test]
fn random_selection_is_uniform() {
    // L = 4, spacing 1, n = 2 admits exactly {0,2}, {0,3}, {1,3}.
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for seed in 0..3000 {
        let r = random_select(4, 2, 1, seed).unwrap();
        *counts.entry(r.layers).or_default() += 1;
    }
    assert_eq!(counts.len(), 3);
    let chi2: f64 = counts.values().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
    // 99.9th percentile of chi-square with 2 degrees of freedom.
    assert!(chi2 < 13.82, "{counts:?} chi2 {chi2}");
}

#[test]
fn random_selection_respects_spacing() {
    for l in 1..14 {
        for spacing in 0..4 {
            for n in 0..=max_spaced(l, spacing) {
                for seed in 0..5 {
                    let r = random_select(l, n, spacing, seed).unwrap();
                    assert_eq!(r.layers.len(), n);
                    assert!(r.respects_spacing(spacing));
                    assert!(r.layers.iter().all(|&x| x < l));
                }
            }
            assert!(random_select(l, max_spaced(l, spacing) + 1, spacing, 0).is_err());
        }
    }
}

#[test]
fn greedy_window_filter() {
    let s = [0.0, 0.1, 0.5, 0.4, 0.3, 0.2];
    let r = greedy_select_in(&s, 2, 1, |k| (2..=5).contains(&k));
    assert_eq!(r.order, vec![5, 3]);
}

#[test]
fn layer_scores_from_sweep() {
    let m = random_model(&FixtureSpec::gpt2(5), 1).unwrap();
    let ps = PromptSet::new("t", random_prompts(64, 4, 8, 1)).unwrap();
    let mat = sweep_distances(&m, PairFilter::All, Protocol::Interchange, &ps, Positions::Last).unwrap();
    let any = layer_scores_from_pairs(&mat, ScoreMode::MinAny).unwrap();
    let nb = layer_scores_from_pairs(&mat, ScoreMode::MinNeighbor).unwrap();
    for l in 0..5 {
        let expect = (0..5)
            .filter(|&k| k != l)
            .map(|k| mat.distance(l.min(k), l.max(k)).unwrap())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(any[l], expect);
        assert!(nb[l] >= any[l]);
    }
    let adj = sweep_distances(&m, PairFilter::MaxGap(1), Protocol::Interchange, &ps, Positions::Last).unwrap();
    assert!(layer_scores_from_pairs(&adj, ScoreMode::MinAny).is_ok());
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

#[test]
fn cka_matches_gram_form_and_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let x = random_tensor(30, 6, &mut rng);
        let y = random_tensor(30, 5, &mut rng);
        let a = linear_cka(&x, &y).unwrap().unwrap();
        let b = linear_cka_gram(&x, &y).unwrap();
        assert!((a - b).abs() < 1e-6, "{a} {b}");
        let self_sim = linear_cka(&x, &x).unwrap().unwrap();
        assert!((self_sim - 1.0).abs() < 1e-6);
        // Isotropic scaling and a coordinate permutation leave CKA unchanged.
        let scaled = Tensor::new(vec![30, 6], x.data().iter().map(|v| v * 3.5).collect()).unwrap();
        let perm_rows: Vec<Vec<f32>> = (0..30)
            .map(|r| {
                let row = x.row(r);
                (0..6).map(|c| row[(c + 2) % 6]).collect()
            })
            .collect();
        let perm = Tensor::from_rows(&perm_rows).unwrap();
        assert!((linear_cka(&scaled, &y).unwrap().unwrap() - a).abs() < 1e-6);
        assert!((linear_cka(&perm, &y).unwrap().unwrap() - a).abs() < 1e-6);
    }
    let tiny = random_tensor(3, 4, &mut rng);
    assert!(linear_cka(&tiny, &tiny).is_err());
    let constant = Tensor::new(vec![10, 3], vec![1.0; 30]).unwrap();
    assert!(linear_cka(&constant, &random_tensor(10, 3, &mut rng)).unwrap().is_none());
}

#[test]
fn bi_is_zero_for_a_silent_block() {
    let mut m = random_model(&FixtureSpec::gpt2(3), 2).unwrap();
    let silent = &mut m.layers[1];
    silent.wo = Tensor::zeros(silent.wo.shape().to_vec());
    silent.w_down = Tensor::zeros(silent.w_down.shape().to_vec());
    silent.bo = silent.bo.as_ref().map(|b| vec![0.0; b.len()]);
    silent.b_down = silent.b_down.as_ref().map(|b| vec![0.0; b.len()]);
    let ps = PromptSet::new("t", random_prompts(64, 3, 8, 2)).unwrap();
    let bi = bi_scores(&m, &ps).unwrap();
    assert!(bi.scores[1].abs() < 1e-6, "{:?}", bi.scores);
    assert!(bi.scores[0] > 1e-3 && bi.scores[2] > 1e-3);
    let r = greedy_select(&bi.scores, 1, 1);
    assert_eq!(r.layers, vec![1]);
    let cka = cka_adjacent(&m, &ps).unwrap();
    assert_eq!(cka.adjacent.len(), 2);
    assert_eq!(cka.removal_scores().len(), 3);
}

#[test]
fn contract_oracle_matches_evaluator() {
    let m = random_model(&FixtureSpec::llama(3), 3).unwrap();
    let corpus = TokenCorpus::new("c", "random", 64, random_prompts(64, 1, 300, 3).pop().unwrap()).unwrap();
    let contract = EvalContract::new("t", "c", 64, 32).unwrap();
    let o = ContractOracle {
        model: &m,
        corpus: &corpus,
        contract: &contract,
    };
    let direct = sliding_window_ppl(&m, &corpus, &contract, &[InterventionSpec::delete([1])]).unwrap();
    assert_eq!(o.ppl(&[1]).unwrap(), direct.ppl);
    assert_eq!(o.ppl(&[0, 1, 2]).unwrap(), f64::INFINITY);
    assert_eq!(o.contract_id(), contract.id());
}

proptest! {
    #[test]
    fn greedy_is_invariant_under_cubing(
        s in prop::collection::vec(-5.0f64..5.0, 1..30),
        n in 0usize..10,
        spacing in 0usize..4,
    ) {
        let cubed: Vec<f64> = s.iter().map(|x| x * x * x).collect();
        let a = greedy_select(&s, n, spacing);
        let b = greedy_select(&cubed, n, spacing);
        prop_assert_eq!(&a.layers, &b.layers);
        prop_assert!(a.respects_spacing(spacing));
    }

    #[test]
    fn every_greedy_selection_respects_spacing(
        s in prop::collection::vec(0.0f64..1.0, 1..40),
        n in 0usize..20,
        spacing in 0usize..5,
    ) {
        let r = greedy_select(&s, n, spacing);
        prop_assert!(r.respects_spacing(spacing));
        prop_assert!(r.layers.len() <= n);
        prop_assert_eq!(r.shortfall, r.layers.len() < n);
    }
}
