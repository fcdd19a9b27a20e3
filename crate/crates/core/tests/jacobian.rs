use protogap_core::fixtures::{random_model, random_prompts, FixtureSpec};
use protogap_core::jacobian::{jacobian_report, power_iteration, LinearResidual, PowerConfig, ResidualMap};
use protogap_core::metrics::PromptSet;
use protogap_core::model::{forward, BlockProbe};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Largest singular value of a dense `d x d` matrix via cyclic Jacobi
/// eigen-decomposition of `A^T A`.
fn top_singular_value(a: &[f64], d: usize) -> f64 {
    let mut m = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            m[i * d + j] = (0..d).map(|k| a[k * d + i] * a[k * d + j]).sum();
        }
    }
    for _ in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j].powi(2))
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..d).map(|i| m[i * d + i]).fold(0.0, f64::max).sqrt()
}

#[test]
fn jacobi_oracle_on_known_matrix() {
    // Singular values of [[3, 0], [4, 5]] are sqrt(45) and sqrt(5).
    let s = top_singular_value(&[3.0, 0.0, 4.0, 5.0], 2);
    assert!((s - 45f64.sqrt()).abs() < 1e-10);
}

// Three of the hundred draws have sigma_2 / sigma_1 close enough to 1 that
// twenty plain power steps land 2-4% low. Run with `--ignored` to see it.
#[test]
#[ignore = "20 power steps miss 2% on 3/100 near-degenerate draws"]
fn power_iteration_matches_svd_on_random_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let d = 16;
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let a: Vec<f32> = (0..d * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let x0: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let oracle = top_singular_value(&a.iter().map(|&v| v as f64).collect::<Vec<_>>(), d);
        let g = LinearResidual::new(a, x0).unwrap();
        let cfg = PowerConfig {
            iterations: 20,
            epsilon: 1e-3,
            seed: trial,
        };
        let est = power_iteration(&g, &cfg).unwrap().sigma.unwrap();
        worst = worst.max((est - oracle).abs() / oracle);
    }
    assert!(worst < 0.02, "worst relative error {worst}");
}

#[test]
fn power_iteration_converges_to_svd_on_random_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let d = 16;
    for trial in 0..100 {
        let a: Vec<f32> = (0..d * d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let x0: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let oracle = top_singular_value(&a.iter().map(|&v| v as f64).collect::<Vec<_>>(), d);
        let g = LinearResidual::new(a, x0).unwrap();
        let short = PowerConfig {
            iterations: 20,
            epsilon: 1e-3,
            seed: trial,
        };
        let long = PowerConfig {
            iterations: 200,
            ..short
        };
        let est20 = power_iteration(&g, &short).unwrap();
        let est200 = power_iteration(&g, &long).unwrap().sigma.unwrap();
        assert!((est200 - oracle).abs() / oracle < 1e-4, "trial {trial}: {est200} vs {oracle}");
        // The Rayleigh estimate approaches from below and never overshoots.
        assert!(est20.sigma.unwrap() <= oracle * (1.0 + 1e-4));
        assert!(est20.trace.windows(2).all(|w| w[1] >= w[0] * (1.0 - 1e-6)));
    }
}

#[test]
fn block_estimate_matches_explicit_jacobian() {
    let m = random_model(&FixtureSpec::gpt2(3), 5).unwrap();
    let tokens = &random_prompts(64, 1, 8, 1)[0];
    let hidden = forward(&m, tokens, &[], true).unwrap().hidden.unwrap();
    let probe = BlockProbe::new(&m, 1, &hidden[1], true).unwrap();
    let x0 = probe.point().to_vec();
    let d = x0.len();
    // Explicit Jacobian, one central-difference column per coordinate.
    let h = 1e-2f32;
    let mut jac = vec![0.0f64; d * d];
    for c in 0..d {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[c] += h;
        xm[c] -= h;
        let gp = ResidualMap::residual(&probe, &xp).unwrap();
        let gm = ResidualMap::residual(&probe, &xm).unwrap();
        for r in 0..d {
            jac[r * d + c] = (gp[r] as f64 - gm[r] as f64) / (xp[c] as f64 - xm[c] as f64);
        }
    }
    let oracle = top_singular_value(&jac, d);
    let est = power_iteration(
        &probe,
        &PowerConfig {
            iterations: 40,
            epsilon: 1e-2,
            seed: 3,
        },
    )
    .unwrap()
    .sigma
    .unwrap();
    assert!((est - oracle).abs() / oracle < 0.02, "{est} vs {oracle}");
}

#[test]
fn report_rows_and_determinism() {
    let m = random_model(&FixtureSpec::llama(3), 6).unwrap();
    let ps = PromptSet::new("j", random_prompts(64, 3, 6, 2)).unwrap();
    let cfg = PowerConfig {
        iterations: 8,
        ..PowerConfig::default()
    };
    let a = jacobian_report(&m, &[0, 2], &ps, &cfg).unwrap();
    let b = jacobian_report(&m, &[0, 2], &ps, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.len(), 2);
    for r in &a.rows {
        assert_eq!(r.per_prompt.len(), 3);
        assert!(r.flagged_prompts.is_empty());
        let (lo, hi, mean) = (r.min.unwrap(), r.max.unwrap(), r.mean.unwrap());
        assert!(lo <= mean && mean <= hi && lo > 0.0);
    }
    assert_eq!(a.to_csv().lines().count(), 3);
    assert!(jacobian_report(&m, &[3], &ps, &cfg).is_err());
}
