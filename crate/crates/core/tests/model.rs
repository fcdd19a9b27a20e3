use protogap_core::fixtures::{golden_two_layer, identical_layers, random_model, random_prompts, FixtureSpec};
use protogap_core::golden::GoldenFixture;
use protogap_core::model::{
    forward, forward_with, load_checkpoint, materialize_pruned, Checkpoint, ForwardOptions, InterventionSpec,
    LogitRows,
};
use protogap_core::Error;

fn families(n: usize) -> Vec<FixtureSpec> {
    vec![
        FixtureSpec::gpt2(n),
        FixtureSpec::llama(n),
        FixtureSpec::qwen(n),
        FixtureSpec::bloom(n),
        FixtureSpec::neox(n),
    ]
}

fn max_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

fn logits(m: &Checkpoint, tokens: &[u32], ivs: &[InterventionSpec]) -> Vec<f32> {
    forward(m, tokens, ivs, false).unwrap().logits.data().to_vec()
}

#[test]
fn container_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    for (k, spec) in families(3).iter().enumerate() {
        let m = random_model(spec, 7 + k as u64).unwrap();
        let p = dir.path().join(format!("m{k}.ckpt"));
        m.save(&p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes().unwrap(), std::fs::read(&p).unwrap());
        assert_eq!(back.payload_hash(), m.payload_hash());
    }
}

#[test]
fn container_layout() {
    let m = golden_two_layer();
    let bytes = m.to_bytes().unwrap();
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n]).unwrap();
    assert_eq!(header["config"]["n_layers"], 2);
    assert_eq!(header["config"]["d_model"], 8);
    let wq = &header["layers.1.Wq"];
    assert_eq!(wq["dtype"], "f32");
    assert_eq!(wq["shape"], serde_json::json!([8, 8]));
    let off = wq["offset"].as_u64().unwrap() as usize + 8 + n;
    let first = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
    assert_eq!(first, m.layers[1].wq.data()[0]);
}

#[test]
fn golden_fixture_loads_with_expected_shape() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("golden.ckpt");
    golden_two_layer().save(&p).unwrap();
    let m = load_checkpoint(&p).unwrap();
    assert_eq!(m.config.n_layers, 2);
    assert_eq!(m.config.d_model, 8);
}

#[test]
fn shape_error_names_the_tensor() {
    let m = random_model(&FixtureSpec::llama(4), 1).unwrap();
    let mut named = m.to_named();
    let wq = named.get("layers.3.Wq").unwrap();
    let bad = protogap_core::tensor::Tensor::zeros(vec![wq.shape()[0] + 1, wq.shape()[1]]);
    named.insert("layers.3.Wq".into(), bad);
    let err = Checkpoint::from_named(m.config.clone(), named).unwrap_err();
    assert!(matches!(&err, Error::Shape { name, .. } if name == "layers.3.Wq"), "{err}");
    assert!(err.to_string().contains("layers.3.Wq"));
}

#[test]
fn header_errors() {
    assert!(matches!(Checkpoint::from_bytes(&[1, 2, 3]), Err(Error::Header(_))));
    let mut bytes = golden_two_layer().to_bytes().unwrap();
    bytes[8] = b'!';
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Header(_))));
    let mut bytes = golden_two_layer().to_bytes().unwrap();
    let len = bytes.len();
    bytes.truncate(len - 4);
    assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Header(_))));
}

#[test]
fn non_finite_weights_are_rejected() {
    let m = golden_two_layer();
    let mut named = m.to_named();
    let t = named.get_mut("layers.0.Wv").unwrap();
    t.data_mut()[3] = f32::NAN;
    assert!(matches!(Checkpoint::from_named(m.config.clone(), named), Err(Error::NonFinite(_))));
}

#[test]
fn forward_is_deterministic_and_normalized() {
    for spec in families(3) {
        let m = random_model(&spec, 3).unwrap();
        let t = &random_prompts(spec.vocab_size, 1, 12, 9)[0];
        let a = forward(&m, t, &[], true).unwrap();
        let b = forward(&m, t, &[], true).unwrap();
        assert_eq!(a.logits.data(), b.logits.data());
        assert_eq!(a.hidden.as_ref().unwrap().len(), spec.n_layers + 1);
        for d in a.distributions() {
            assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert!(forward(&m, t, &[], false).unwrap().hidden.is_none());
    }
}

#[test]
fn last_row_matches_full_forward() {
    let m = random_model(&FixtureSpec::qwen(2), 4).unwrap();
    let t = &random_prompts(64, 1, 10, 1)[0];
    let full = forward(&m, t, &[], false).unwrap();
    let last = forward_with(
        &m,
        t,
        &[],
        ForwardOptions {
            capture: false,
            logits: LogitRows::Last,
        },
    )
    .unwrap();
    assert_eq!(last.logits.rows(), 1);
    assert!(max_diff(last.logits.row(0), full.logits.row(9)) < 1e-6);
}

#[test]
fn self_interchange_is_identity() {
    for spec in families(4) {
        let m = random_model(&spec, 11).unwrap();
        let t = &random_prompts(spec.vocab_size, 1, 9, 2)[0];
        let base = logits(&m, t, &[]);
        for i in 0..4 {
            assert!(max_diff(&base, &logits(&m, t, &[InterventionSpec::interchange(i, i)])) < 1e-6);
            assert!(max_diff(&base, &logits(&m, t, &[InterventionSpec::replace(i, i)])) < 1e-6);
        }
    }
}

#[test]
fn interchange_is_order_free() {
    let m = random_model(&FixtureSpec::llama(5), 2).unwrap();
    let t = &random_prompts(64, 1, 8, 3)[0];
    assert_eq!(
        logits(&m, t, &[InterventionSpec::interchange(1, 3)]),
        logits(&m, t, &[InterventionSpec::interchange(3, 1)])
    );
}

#[test]
fn replace_then_restore_is_identity() {
    let m = random_model(&FixtureSpec::gpt2(4), 5).unwrap();
    let t = &random_prompts(64, 1, 8, 4)[0];
    let base = logits(&m, t, &[]);
    let ivs = [InterventionSpec::replace(2, 0), InterventionSpec::replace(2, 2)];
    assert!(max_diff(&base, &logits(&m, t, &ivs)) < 1e-6);
    assert!(max_diff(&base, &logits(&m, t, &ivs[..1])) > 1e-4);
}

#[test]
fn delete_matches_materialized_model() {
    for (k, spec) in families(5).into_iter().enumerate() {
        let m = random_model(&spec, 40 + k as u64).unwrap();
        let t = &random_prompts(spec.vocab_size, 1, 10, k as u64)[0];
        for set in [vec![0], vec![4], vec![1, 3], vec![0, 2, 4]] {
            let small = materialize_pruned(&m, &set).unwrap();
            assert_eq!(small.config.n_layers, 5 - set.len());
            let d = max_diff(&logits(&m, t, &[InterventionSpec::delete(set.clone())]), &logits(&small, t, &[]));
            assert!(d < 1e-5, "{spec:?} {set:?} {d}");
        }
    }
}

#[test]
fn materialize_semantics() {
    let m = random_model(&FixtureSpec::gpt2(4), 6).unwrap();
    assert_eq!(materialize_pruned(&m, &[]).unwrap(), m);
    let p = materialize_pruned(&m, &[1, 2]).unwrap();
    assert_eq!(p.layers, vec![m.layers[0].clone(), m.layers[3].clone()]);
    assert!(materialize_pruned(&m, &[0, 1, 2, 3]).is_err());
    assert!(materialize_pruned(&m, &[4]).is_err());
}

#[test]
fn overlays_never_touch_stored_weights() {
    let m = random_model(&FixtureSpec::llama(4), 8).unwrap();
    let before = m.payload_hash();
    let t = &random_prompts(64, 1, 8, 5)[0];
    for iv in [
        "replace:0<-3",
        "interchange:1,2",
        "delete:0,3",
        "average:1,2",
        "share:0@0,1,2",
        "head:2<-1#1",
        "rope-off",
    ] {
        forward(&m, t, &[iv.parse().unwrap()], true).unwrap();
    }
    assert_eq!(m.payload_hash(), before);
}

#[test]
fn average_and_share_semantics() {
    let m = random_model(&FixtureSpec::gpt2(3), 9).unwrap();
    let t = &random_prompts(64, 1, 8, 6)[0];
    // Sharing a layer with itself at its own slot changes nothing.
    let base = logits(&m, t, &[]);
    assert!(max_diff(&base, &logits(&m, t, &["share:1@1".parse().unwrap()])) < 1e-6);
    // Share{0 @ 0,1} is the same routing as Replace{1 <- 0}.
    assert_eq!(
        logits(&m, t, &["share:0@0,1".parse().unwrap()]),
        logits(&m, t, &[InterventionSpec::replace(1, 0)])
    );
    // Averaging identical layers is the identity.
    let same = identical_layers(&m);
    let b = logits(&same, t, &[]);
    assert!(max_diff(&b, &logits(&same, t, &["average:0,2".parse().unwrap()])) < 1e-5);
}

#[test]
fn head_replace_from_identical_layer_is_identity() {
    let m = identical_layers(&random_model(&FixtureSpec::qwen(3), 12).unwrap());
    let t = &random_prompts(64, 1, 8, 7)[0];
    let base = logits(&m, t, &[]);
    for h in 0..m.config.n_heads {
        let iv = InterventionSpec::HeadReplace {
            target: 2,
            source: 0,
            head: h,
        };
        assert!(max_diff(&base, &logits(&m, t, &[iv])) < 1e-6);
    }
    let r = random_model(&FixtureSpec::qwen(3), 12).unwrap();
    let iv = InterventionSpec::HeadReplace {
        target: 2,
        source: 0,
        head: 0,
    };
    assert!(max_diff(&logits(&r, t, &[]), &logits(&r, t, &[iv])) > 1e-5);
}

#[test]
fn spec_errors() {
    let m = random_model(&FixtureSpec::gpt2(3), 1).unwrap();
    let t = [1u32, 2, 3];
    for ivs in [
        vec![InterventionSpec::replace(0, 3)],
        vec![InterventionSpec::delete([1, 1])],
        vec![InterventionSpec::delete([0, 1, 2])],
        vec![InterventionSpec::delete([1]), InterventionSpec::replace(1, 0)],
    ] {
        assert!(matches!(forward(&m, &t, &ivs, false), Err(Error::Spec(_))), "{ivs:?}");
    }
    assert!(forward(&m, &[64], &[], false).is_err());
    assert!(forward(&m, &vec![0; 257], &[], false).is_err());
    // No rotary angles to zero on an absolute-position model.
    assert_eq!(logits(&m, &t, &[InterventionSpec::RopeOff]), logits(&m, &t, &[]));
}

#[test]
fn rope_off_changes_rotary_models() {
    let m = random_model(&FixtureSpec::llama(2), 13).unwrap();
    let t = &random_prompts(64, 1, 8, 8)[0];
    assert!(max_diff(&logits(&m, t, &[]), &logits(&m, t, &[InterventionSpec::RopeOff])) > 1e-4);
}

#[test]
fn golden_logit_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m = golden_two_layer();
    let seqs = random_prompts(m.config.vocab_size, 4, 16, 1);
    let g = GoldenFixture::record(&m, "self", seqs).unwrap();
    let p = dir.path().join("golden.json");
    g.save(&p).unwrap();
    let back = GoldenFixture::load(&p).unwrap();
    let cmp = back.compare(&m, 1e-3).unwrap();
    assert!(cmp.passed);
    assert_eq!(cmp.max_abs_diff, 0.0);

    let other = random_model(
        &FixtureSpec {
            d_model: 8,
            n_heads: 2,
            n_kv_heads: 2,
            d_ff: 32,
            vocab_size: 32,
            max_position: 64,
            ..FixtureSpec::gpt2(2)
        },
        99,
    )
    .unwrap();
    assert!(!back.compare(&other, 1e-3).unwrap().passed);
    let too_many = GoldenFixture {
        sequences: vec![vec![1]; 9],
        logits: vec![vec![vec![0.0; 32]]; 9],
        ..back
    };
    assert!(too_many.validate(32).is_err());
}
