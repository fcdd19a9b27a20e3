use proptest::prelude::*;
use protogap_core::fixtures::{
    content_blind_attention, golden_two_layer, identical_layers, random_model, random_prompts, FixtureSpec,
};
use protogap_core::metrics::{
    classify_pair, enumerate_pairs, head_swap_distance, interchange_distance, kl_divergence, protocol_gap_report,
    replacement_distance, rope_counterfactual, symmetrize, symmetrize_all, sweep_distances, ClassifierThresholds,
    DistanceMatrix, DistanceProbe, PairClass, PairFilter, Positions, PromptSet, Protocol, Regime, RegimeConfig,
    Symmetrization,
};
use protogap_core::model::{forward, Checkpoint, InterventionSpec};
use protogap_core::tensor::softmax_f64;

fn prompts(vocab: usize, count: usize, len: usize, seed: u64) -> PromptSet {
    PromptSet::new(format!("test-s{seed}"), random_prompts(vocab, count, len, seed)).unwrap()
}

/// Straightforward reference: KL summed in f64 with no shared code paths.
fn kl_ref(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a / b.max(1e-12)).ln())
        .sum::<f64>()
        .max(0.0)
}

fn last_dist(m: &Checkpoint, t: &[u32], ivs: &[InterventionSpec]) -> Vec<f64> {
    let out = forward(m, t, ivs, false).unwrap();
    softmax_f64(out.logits.row(out.logits.rows() - 1))
}

#[test]
fn kl_matches_reference() {
    let p = [0.5, 0.25, 0.25];
    let q = [0.25, 0.5, 0.25];
    let expected = 0.5 * 2f64.ln() + 0.25 * 0.5f64.ln();
    assert!((kl_divergence(&p, &q).unwrap() - expected).abs() < 1e-15);
    assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    assert!(kl_divergence(&p, &q[..2]).is_err());
    assert!(kl_divergence(&[0.5, 0.6], &[0.5, 0.5]).is_err());
}

#[test]
fn replacement_matches_manual_prompt_mean() {
    let m = random_model(&FixtureSpec::llama(4), 21).unwrap();
    let ps = prompts(64, 6, 10, 1);
    let (i, j) = (1, 3);
    let rec = replacement_distance(&m, i, j, &ps, Positions::Last).unwrap();
    let mean_kl = |ivs: &[InterventionSpec]| {
        ps.prompts
            .iter()
            .map(|t| kl_ref(&last_dist(&m, t, &[]), &last_dist(&m, t, ivs)))
            .sum::<f64>()
            / ps.len() as f64
    };
    let ij = mean_kl(&[InterventionSpec::replace(i, j)]);
    let ji = mean_kl(&[InterventionSpec::replace(j, i)]);
    assert!((rec.kl_ij.unwrap() - ij).abs() < 1e-9);
    assert!((rec.kl_ji.unwrap() - ji).abs() < 1e-9);
    assert!((rec.distance().unwrap() - ij.max(ji)).abs() < 1e-9);
    assert!((rec.d_mean.unwrap() - (ij + ji) / 2.0).abs() < 1e-9);
    assert!((rec.d_geo.unwrap() - (ij * ji).sqrt()).abs() < 1e-9);
    assert!((rec.d_min.unwrap() - ij.min(ji)).abs() < 1e-9);
    assert_eq!(rec.prompts_ij.len(), 6);
}

#[test]
fn interchange_matches_manual_all_positions() {
    let m = random_model(&FixtureSpec::gpt2(3), 22).unwrap();
    let ps = prompts(64, 4, 7, 2);
    let rec = interchange_distance(&m, 0, 2, &ps, Positions::All).unwrap();
    let iv = [InterventionSpec::interchange(0, 2)];
    let per_prompt: Vec<f64> = ps
        .prompts
        .iter()
        .map(|t| {
            let a = forward(&m, t, &[], false).unwrap();
            let b = forward(&m, t, &iv, false).unwrap();
            (0..t.len())
                .map(|r| kl_ref(&softmax_f64(a.logits.row(r)), &softmax_f64(b.logits.row(r))))
                .sum::<f64>()
                / t.len() as f64
        })
        .collect();
    let expected = per_prompt.iter().sum::<f64>() / 4.0;
    assert!((rec.distance().unwrap() - expected).abs() < 1e-9);
    assert_eq!(rec.kl_ij, rec.kl_ji);
}

#[test]
fn protocol_identities() {
    for spec in [FixtureSpec::gpt2(4), FixtureSpec::llama(4), FixtureSpec::bloom(4)] {
        let m = random_model(&spec, 5).unwrap();
        let ps = prompts(spec.vocab_size, 4, 8, 3);
        let probe = DistanceProbe::new(&m, &ps, Positions::Last).unwrap();
        for i in 0..4 {
            assert_eq!(probe.replacement(i, i).unwrap().distance(), Some(0.0));
            assert_eq!(probe.interchange(i, i).unwrap().distance(), Some(0.0));
            for j in 0..4 {
                let a = probe.interchange(i, j).unwrap();
                let b = probe.interchange(j, i).unwrap();
                assert_eq!(a.distance(), b.distance());
                let r1 = probe.replacement(i, j).unwrap().distance();
                let r2 = probe.replacement(j, i).unwrap().distance();
                assert_eq!(r1, r2);
            }
        }
    }
}

#[test]
fn identical_layers_are_strong_and_tied() {
    let m = identical_layers(&random_model(&FixtureSpec::qwen(4), 6).unwrap());
    let ps = prompts(64, 4, 8, 4);
    let r = sweep_distances(&m, PairFilter::All, Protocol::Replacement, &ps, Positions::Last).unwrap();
    let i = sweep_distances(&m, PairFilter::All, Protocol::Interchange, &ps, Positions::Last).unwrap();
    assert_eq!(r.records.len(), 6);
    assert_eq!(r.strong_count, 6);
    assert_eq!(i.strong_count, 6);
    for rec in r.records.iter().chain(&i.records) {
        assert!(rec.distance().unwrap() < 1e-9);
    }
    let gap = protocol_gap_report(&r, &i, &ClassifierThresholds::default(), &RegimeConfig::default()).unwrap();
    assert_eq!(gap.verdict, Regime::Tied);
}

#[test]
fn pair_filters_enumerate_expected_counts() {
    assert_eq!(enumerate_pairs(24, PairFilter::All).len(), 276);
    assert_eq!(enumerate_pairs(24, PairFilter::Adjacent).len(), 23);
    assert_eq!(enumerate_pairs(24, PairFilter::MaxGap(3)).len(), 23 + 22 + 21);
    for (i, j) in enumerate_pairs(10, PairFilter::MaxGap(2)) {
        assert!(i < j && j - i <= 2);
    }
    assert_eq!("gap:3".parse::<PairFilter>().unwrap(), PairFilter::MaxGap(3));
    assert_eq!(PairFilter::Adjacent.to_string(), "adjacent");
}

#[test]
fn sweep_is_deterministic_and_round_trips() {
    let m = random_model(&FixtureSpec::neox(4), 8).unwrap();
    let ps = prompts(64, 5, 9, 5);
    let a = sweep_distances(&m, PairFilter::All, Protocol::Replacement, &ps, Positions::Last).unwrap();
    let b = sweep_distances(&m, PairFilter::All, Protocol::Replacement, &ps, Positions::Last).unwrap();
    assert_eq!(a, b);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.json");
    std::fs::write(&p, a.to_json().unwrap()).unwrap();
    assert_eq!(DistanceMatrix::load(&p).unwrap(), a);
    let csv = a.to_csv();
    assert_eq!(csv.lines().count(), 1 + 6);
}

#[test]
fn gap_is_replacement_minus_interchange() {
    let m = random_model(&FixtureSpec::llama(5), 9).unwrap();
    let ps = prompts(64, 6, 8, 6);
    let probe = DistanceProbe::new(&m, &ps, Positions::Last).unwrap();
    let r = probe.sweep(PairFilter::All, Protocol::Replacement).unwrap();
    let i = probe.sweep(PairFilter::All, Protocol::Interchange).unwrap();
    let gap = protocol_gap_report(&r, &i, probe.thresholds(), &RegimeConfig::default()).unwrap();
    assert_eq!(gap.pairs.len(), 10);
    for p in &gap.pairs {
        let dr = r.distance(p.i, p.j).unwrap();
        let di = i.distance(p.i, p.j).unwrap();
        assert!((p.gap.unwrap() - (dr - di)).abs() < 1e-12);
        if di > dr {
            assert!(gap.interchange_exceeds_replacement.contains(&(p.i, p.j)));
        }
    }
    let mean = gap.pairs.iter().map(|p| p.gap.unwrap()).sum::<f64>() / 10.0;
    assert!((gap.pooled.unwrap().mean - mean).abs() < 1e-12);
}

#[test]
fn override_drives_verdict() {
    let m = random_model(&FixtureSpec::gpt2(4), 10).unwrap();
    let ps = prompts(64, 4, 8, 7);
    let probe = DistanceProbe::new(&m, &ps, Positions::Last).unwrap();
    let r = probe.sweep(PairFilter::Adjacent, Protocol::Replacement).unwrap();
    let i = probe.sweep(PairFilter::Adjacent, Protocol::Interchange).unwrap();
    let t = ClassifierThresholds::default();
    let rep = protocol_gap_report(&r, &i, &t, &RegimeConfig::with_override(1.03, "pruning-dppl")).unwrap();
    assert_eq!(rep.verdict, Regime::Tied);
    assert_eq!(rep.ir_level, "pruning-dppl");
    if rep.median_repl.unwrap() > t.conditional {
        let rep = protocol_gap_report(&r, &i, &t, &RegimeConfig::with_override(0.21, "pruning-dppl")).unwrap();
        assert_eq!(rep.verdict, Regime::Divergent);
    }
}

#[test]
fn head_swap_with_itself_is_zero() {
    let m = golden_two_layer();
    let ps = prompts(32, 3, 6, 8);
    assert_eq!(head_swap_distance(&m, 1, 1, 0, &ps).unwrap(), 0.0);
    assert!(head_swap_distance(&m, 1, 0, 1, &ps).unwrap() > 0.0);
}

#[test]
fn counterfactual_requires_rotary() {
    let m = random_model(&FixtureSpec::gpt2(3), 1).unwrap();
    let ps = prompts(64, 3, 6, 9);
    let pairs = enumerate_pairs(3, PairFilter::Adjacent);
    let t = ClassifierThresholds::default();
    assert!(rope_counterfactual(&m, &pairs, &ps, Positions::Last, &t, &RegimeConfig::default()).is_err());
}

#[test]
fn counterfactual_is_null_when_attention_ignores_position() {
    let m = content_blind_attention(&random_model(&FixtureSpec::llama(4), 2).unwrap());
    let ps = prompts(64, 4, 8, 10);
    let pairs = enumerate_pairs(4, PairFilter::All);
    let t = ClassifierThresholds::default();
    let rep = rope_counterfactual(&m, &pairs, &ps, Positions::Last, &t, &RegimeConfig::default()).unwrap();
    assert!(rep.baseline_divergence < 1e-9, "{}", rep.baseline_divergence);
    for s in &rep.shifts {
        assert!((s.gap_rope.unwrap() - s.gap_no_rope.unwrap()).abs() < 1e-6);
    }
}

#[test]
fn counterfactual_reports_on_rotary_model() {
    let m = random_model(&FixtureSpec::llama(4), 3).unwrap();
    let ps = prompts(64, 4, 8, 11);
    let pairs = enumerate_pairs(4, PairFilter::All);
    let t = ClassifierThresholds::default();
    let rep = rope_counterfactual(&m, &pairs, &ps, Positions::Last, &t, &RegimeConfig::default()).unwrap();
    assert!(rep.baseline_divergence > 0.0);
    assert_eq!(rep.shifts.len(), 6);
    assert_eq!(rep.baseline_divergence_per_prompt.len(), 4);
    for s in &rep.shifts {
        if let (Some(a), Some(b), Some(d)) = (s.ir_rope, s.ir_no_rope, s.ir_shift) {
            assert!((d - (a - b)).abs() < 1e-12);
        }
    }
}

#[test]
fn classifier_boundaries() {
    let t = ClassifierThresholds::default();
    assert_eq!(classify_pair(0.049, &t), PairClass::Strong);
    assert_eq!(classify_pair(0.05, &t), PairClass::Conditional);
    assert_eq!(classify_pair(0.099, &t), PairClass::Conditional);
    assert_eq!(classify_pair(0.10, &t), PairClass::Non);
    assert_eq!(classify_pair(f64::NAN, &t), PairClass::Flagged);
    assert!(ClassifierThresholds::new(0.2, 0.1).is_err());
}

#[test]
fn prompt_set_checks() {
    let ps = prompts(64, 4, 8, 12);
    assert!(ps.check_vocab(64).is_ok());
    assert!(ps.check_vocab(10).is_err());
    assert!(PromptSet::new("empty", vec![]).is_err());
    let m = random_model(&FixtureSpec::gpt2(2), 1).unwrap();
    let bad = PromptSet::new("big", vec![vec![100, 1]]).unwrap();
    assert!(DistanceProbe::new(&m, &bad, Positions::Last).is_err());
}

proptest! {
    #[test]
    fn symmetrizations_are_ordered(a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let (mx, mean, geo, mn) = symmetrize_all(a, b).unwrap();
        prop_assert!(mx >= mean && mean >= geo && geo >= mn);
        prop_assert_eq!(symmetrize(a, b, Symmetrization::Max).unwrap(), mx);
        prop_assert_eq!(symmetrize(a, b, Symmetrization::Min).unwrap(), mn);
    }
}
