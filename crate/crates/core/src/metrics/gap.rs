use serde::{Deserialize, Serialize};

use super::{ClassifierThresholds, DistanceMatrix, Protocol};
use crate::error::{Error, Result};
use crate::evaluator::stats::{median, quantile_sorted};

/// Numeric cut-offs for the protocol-regime verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub divergent_cutoff: f64,
    pub tied_lo: f64,
    pub tied_hi: f64,
    /// Below this `d_repl` the per-pair ratio is left undefined.
    pub ratio_floor: f64,
    /// Use this I/R instead of the pooled distance ratio, for example one
    /// measured on pruning ΔPPL.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ir_override: Option<f64>,
    #[serde(default = "default_ir_level")]
    pub ir_level: String,
}

fn default_ir_level() -> String {
    "distance".into()
}

impl Default for RegimeConfig {
    fn default() -> Self {
        Self {
            divergent_cutoff: 0.5,
            tied_lo: 0.8,
            tied_hi: 1.25,
            ratio_floor: 1e-9,
            ir_override: None,
            ir_level: default_ir_level(),
        }
    }
}

impl RegimeConfig {
    pub fn with_override(ir: f64, level: impl Into<String>) -> Self {
        Self {
            ir_override: Some(ir),
            ir_level: level.into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Divergent,
    Tied,
    WeakSignal,
    Indeterminate,
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::Divergent => "divergent",
            Regime::Tied => "tied",
            Regime::WeakSignal => "weak-signal",
            Regime::Indeterminate => "indeterminate",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairGap {
    pub i: usize,
    pub j: usize,
    pub d_repl: Option<f64>,
    pub d_inter: Option<f64>,
    pub gap: Option<f64>,
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub p75: f64,
    pub max: f64,
}

impl GapStats {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            median: quantile_sorted(&v, 0.5),
            p75: quantile_sorted(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub model_id: String,
    pub pairs: Vec<PairGap>,
    pub pooled: Option<GapStats>,
    /// The I/R figure the verdict used.
    pub ir: Option<f64>,
    pub ir_level: String,
    /// Mean of the finite per-pair ratios, whatever `ir` ended up being.
    pub pooled_distance_ir: Option<f64>,
    pub median_repl: Option<f64>,
    pub median_inter: Option<f64>,
    pub verdict: Regime,
    pub evidence: String,
    /// Pairs where the interchange distance exceeds the replacement distance.
    pub interchange_exceeds_replacement: Vec<(usize, usize)>,
    pub thresholds: ClassifierThresholds,
    pub config: RegimeConfig,
}

/// Per-pair gaps, pooled statistics and the regime verdict.
pub fn protocol_gap_report(
    repl: &DistanceMatrix,
    inter: &DistanceMatrix,
    thresholds: &ClassifierThresholds,
    cfg: &RegimeConfig,
) -> Result<GapReport> {
    if repl.protocol != Protocol::Replacement || inter.protocol != Protocol::Interchange {
        return Err(Error::Spec(format!(
            "gap report needs a replacement and an interchange matrix, got {} and {}",
            repl.protocol, inter.protocol
        )));
    }
    let mut a = repl.pairs();
    let mut b = inter.pairs();
    a.sort_unstable();
    b.sort_unstable();
    if a != b {
        return Err(Error::Spec("replacement and interchange matrices cover different pair sets".into()));
    }
    let pairs: Vec<PairGap> = repl
        .records
        .iter()
        .map(|r| {
            let d_repl = r.distance();
            let d_inter = inter.distance(r.i, r.j);
            let gap = d_repl.zip(d_inter).map(|(x, y)| x - y);
            let (ratio, flag) = match (d_repl, d_inter) {
                (Some(x), Some(y)) if x >= cfg.ratio_floor => (Some(y / x), None),
                (Some(x), Some(_)) => (None, Some(format!("d_repl {x:.3e} below ratio floor"))),
                _ => (None, Some("non-finite distance".to_string())),
            };
            PairGap {
                i: r.i,
                j: r.j,
                d_repl,
                d_inter,
                gap,
                ratio,
                flag,
            }
        })
        .collect();

    let gaps: Vec<f64> = pairs.iter().filter_map(|p| p.gap).collect();
    let ratios: Vec<f64> = pairs.iter().filter_map(|p| p.ratio).collect();
    let repls: Vec<f64> = pairs.iter().filter_map(|p| p.d_repl).collect();
    let inters: Vec<f64> = pairs.iter().filter_map(|p| p.d_inter).collect();
    let pooled_distance_ir = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
    let (ir, ir_level) = match cfg.ir_override {
        Some(v) => (Some(v), cfg.ir_level.clone()),
        None => (pooled_distance_ir, "distance".to_string()),
    };
    let median_repl = median(&repls);
    let median_inter = median(&inters);
    let all_below_floor = !repls.is_empty()
        && pairs
            .iter()
            .all(|p| p.d_repl.is_some_and(|x| x < cfg.ratio_floor) && p.d_inter.is_some_and(|y| y < cfg.ratio_floor));
    let c = thresholds.conditional;
    let (verdict, evidence) = match (ir, median_repl, median_inter) {
        _ if all_below_floor => (
            Regime::Tied,
            format!("every pair is below the ratio floor {:e} under both protocols", cfg.ratio_floor),
        ),
        (Some(r), Some(mr), _) if r < cfg.divergent_cutoff && mr > c => (
            Regime::Divergent,
            format!("I/R {r:.4} ({ir_level}) < {} and median d_repl {mr:.4} > {c}", cfg.divergent_cutoff),
        ),
        (Some(r), _, _) if (cfg.tied_lo..=cfg.tied_hi).contains(&r) => (
            Regime::Tied,
            format!("I/R {r:.4} ({ir_level}) within [{}, {}]", cfg.tied_lo, cfg.tied_hi),
        ),
        (_, Some(mr), Some(mi)) if mr > c && mi > c => (
            Regime::WeakSignal,
            format!("median d_repl {mr:.4} and median d_inter {mi:.4} both exceed {c}"),
        ),
        _ => (
            Regime::Indeterminate,
            format!(
                "I/R {} ({ir_level}), median d_repl {}, median d_inter {} match no rule",
                fmt_opt(ir),
                fmt_opt(median_repl),
                fmt_opt(median_inter)
            ),
        ),
    };
    let exceeds = pairs
        .iter()
        .filter(|p| matches!((p.d_repl, p.d_inter), (Some(x), Some(y)) if y > x))
        .map(|p| (p.i, p.j))
        .collect();
    Ok(GapReport {
        model_id: repl.model_id.clone(),
        pooled: GapStats::from_values(&gaps),
        pairs,
        ir,
        ir_level,
        pooled_distance_ir,
        median_repl,
        median_inter,
        verdict,
        evidence,
        interchange_exceeds_replacement: exceeds,
        thresholds: *thresholds,
        config: cfg.clone(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}
