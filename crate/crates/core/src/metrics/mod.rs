//! Output-grounded layer distances under the replacement and interchange
//! protocols, their symmetrizations, and protocol-gap summaries.

mod counterfactual;
mod distance;
mod gap;

pub use counterfactual::{rope_counterfactual, CounterfactualReport, PairShift};
pub use distance::{
    enumerate_pairs, head_swap_distance, interchange_distance, replacement_distance, sweep_distances,
    BootstrapConfig, DistanceMatrix, DistanceProbe, PairDistanceRecord, PairFilter, Positions, PromptSet, Protocol,
};
pub use gap::{protocol_gap_report, GapReport, GapStats, PairGap, Regime, RegimeConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability floor applied to `q` before taking logs.
pub const Q_FLOOR: f64 = 1e-12;

const SUM_TOL: f64 = 1e-4;

fn check_distribution(p: &[f64], name: &str) -> Result<()> {
    if p.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::Domain(format!("{name} has a negative or non-finite entry")));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SUM_TOL {
        return Err(Error::Domain(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

/// `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Dimension(format!("kl_divergence: lengths {} and {}", p.len(), q.len())));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(kl_unchecked(p, q))
}

/// KL without the distribution checks; for internally produced softmaxes.
pub(crate) fn kl_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (&pk, &qk) in p.iter().zip(q) {
        if pk > 0.0 {
            acc += pk * (pk.ln() - qk.max(Q_FLOOR).ln());
        }
    }
    acc.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Symmetrization {
    Max,
    Mean,
    Geometric,
    Min,
}

impl Symmetrization {
    pub const ALL: [Symmetrization; 4] = [Self::Max, Self::Mean, Self::Geometric, Self::Min];
}

/// All four symmetrizations at once, as `(max, mean, geometric, min)`.
///
/// Rounding is kept from breaking `max >= mean >= geometric >= min`.
pub fn symmetrize_all(a: f64, b: f64) -> Result<(f64, f64, f64, f64)> {
    if a.is_nan() || b.is_nan() || a < 0.0 || b < 0.0 {
        return Err(Error::Domain(format!("symmetrize needs non-negative inputs, got ({a}, {b})")));
    }
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    let mean = (lo + (hi - lo) / 2.0).clamp(lo, hi);
    let geo = (lo.sqrt() * hi.sqrt()).clamp(lo, mean);
    Ok((hi, mean, geo, lo))
}

pub fn symmetrize(kl_ij: f64, kl_ji: f64, kind: Symmetrization) -> Result<f64> {
    let (max, mean, geo, min) = symmetrize_all(kl_ij, kl_ji)?;
    Ok(match kind {
        Symmetrization::Max => max,
        Symmetrization::Mean => mean,
        Symmetrization::Geometric => geo,
        Symmetrization::Min => min,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierThresholds {
    pub strong: f64,
    pub conditional: f64,
}

impl Default for ClassifierThresholds {
    fn default() -> Self {
        Self {
            strong: 0.05,
            conditional: 0.10,
        }
    }
}

impl ClassifierThresholds {
    pub fn new(strong: f64, conditional: f64) -> Result<Self> {
        let t = Self { strong, conditional };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.strong && self.strong < self.conditional) {
            return Err(Error::Domain(format!(
                "thresholds need 0 < strong < conditional, got {} and {}",
                self.strong, self.conditional
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairClass {
    Strong,
    Conditional,
    Non,
    /// The distance could not be computed (non-finite KL).
    Flagged,
}

impl std::fmt::Display for PairClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PairClass::Strong => "strong",
            PairClass::Conditional => "conditional",
            PairClass::Non => "non",
            PairClass::Flagged => "flagged",
        })
    }
}

/// Non-finite distances are [`PairClass::Flagged`].
pub fn classify_pair(d: f64, t: &ClassifierThresholds) -> PairClass {
    if !d.is_finite() {
        PairClass::Flagged
    } else if d < t.strong {
        PairClass::Strong
    } else if d < t.conditional {
        PairClass::Conditional
    } else {
        PairClass::Non
    }
}
