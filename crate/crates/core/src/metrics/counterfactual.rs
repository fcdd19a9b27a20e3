use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    kl_unchecked, protocol_gap_report, ClassifierThresholds, DistanceMatrix, DistanceProbe, GapReport, Positions,
    PromptSet, Protocol, RegimeConfig,
};
use crate::error::{Error, Result};
use crate::evaluator::stats::{sign_test, SignTest};
use crate::model::{Checkpoint, InterventionSpec, PeType};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairShift {
    pub i: usize,
    pub j: usize,
    pub ir_rope: Option<f64>,
    pub ir_no_rope: Option<f64>,
    pub gap_rope: Option<f64>,
    pub gap_no_rope: Option<f64>,
    /// `ir_rope - ir_no_rope`; positive when the protocol gap widens once
    /// rotary angles are zeroed.
    pub ir_shift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub model_id: String,
    pub with_rope: GapReport,
    pub without_rope: GapReport,
    /// Mean over prompts of `KL(p_rope || p_no_rope)` between the two baselines.
    pub baseline_divergence: f64,
    pub baseline_divergence_per_prompt: Vec<f64>,
    pub shifts: Vec<PairShift>,
    /// One entry per requested pair; `None` where a ratio is undefined.
    pub sign_input: Vec<Option<f64>>,
    pub larger_gap_without_rope: usize,
    pub sign_test: Option<SignTest>,
}

/// Replacement and interchange distances with rotary embeddings on and with
/// every rotation angle set to zero, each measured against its own baseline.
pub fn rope_counterfactual(
    model: &Checkpoint,
    pairs: &[(usize, usize)],
    prompts: &PromptSet,
    positions: Positions,
    thresholds: &ClassifierThresholds,
    regime: &RegimeConfig,
) -> Result<CounterfactualReport> {
    if model.config.pe_type != PeType::Rotary {
        return Err(Error::Spec(format!(
            "the RoPE counterfactual is undefined for {:?} position encodings",
            model.config.pe_type
        )));
    }
    if pairs.is_empty() {
        return Err(Error::Spec("rope_counterfactual needs at least one pair".into()));
    }
    let on = DistanceProbe::new(model, prompts, positions)?.with_thresholds(*thresholds);
    let off = DistanceProbe::with_base(model, prompts, positions, vec![InterventionSpec::RopeOff])?
        .with_thresholds(*thresholds);

    let label = "counterfactual".to_string();
    let sweep = |p: &DistanceProbe, protocol| p.sweep_pairs(pairs, protocol, label.clone());
    let (on_r, on_i, off_r, off_i): (DistanceMatrix, DistanceMatrix, DistanceMatrix, DistanceMatrix) = (
        sweep(&on, Protocol::Replacement)?,
        sweep(&on, Protocol::Interchange)?,
        sweep(&off, Protocol::Replacement)?,
        sweep(&off, Protocol::Interchange)?,
    );
    let with_rope = protocol_gap_report(&on_r, &on_i, thresholds, regime)?;
    let without_rope = protocol_gap_report(&off_r, &off_i, thresholds, regime)?;

    let per_prompt: Vec<f64> = on
        .baseline()
        .par_iter()
        .zip(off.baseline())
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| kl_unchecked(p, q)).sum::<f64>() / a.len() as f64)
        .collect();
    let baseline_divergence = per_prompt.iter().sum::<f64>() / per_prompt.len() as f64;

    let shifts: Vec<PairShift> = with_rope
        .pairs
        .iter()
        .zip(&without_rope.pairs)
        .map(|(a, b)| PairShift {
            i: a.i,
            j: a.j,
            ir_rope: a.ratio,
            ir_no_rope: b.ratio,
            gap_rope: a.gap,
            gap_no_rope: b.gap,
            ir_shift: a.ratio.zip(b.ratio).map(|(x, y)| x - y),
        })
        .collect();
    let sign_input: Vec<Option<f64>> = shifts.iter().map(|s| s.ir_shift).collect();
    let finite: Vec<f64> = sign_input.iter().flatten().copied().collect();
    let larger = finite.iter().filter(|&&d| d > 0.0).count();
    Ok(CounterfactualReport {
        model_id: model.config.model_id(),
        with_rope,
        without_rope,
        baseline_divergence,
        baseline_divergence_per_prompt: per_prompt,
        shifts,
        sign_input,
        larger_gap_without_rope: larger,
        sign_test: sign_test(&finite).ok(),
    })
}
