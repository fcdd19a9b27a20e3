use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{classify_pair, kl_unchecked, symmetrize_all, ClassifierThresholds, PairClass};
use crate::corpus::TokenCorpus;
use crate::error::{Error, Result};
use crate::evaluator::stats::{bootstrap_with, rank_correlation, ConfidenceInterval, RankKind};
use crate::model::{forward_with, Checkpoint, ForwardOptions, InterventionSpec, LogitRows};

/// The prompt set a distance is averaged over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    pub provenance: String,
    pub prompts: Vec<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nominal_len: Option<usize>,
}

impl PromptSet {
    pub fn new(provenance: impl Into<String>, prompts: Vec<Vec<u32>>) -> Result<Self> {
        let nominal_len = prompts.first().map(Vec::len);
        let set = Self {
            provenance: provenance.into(),
            prompts,
            nominal_len,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompts.is_empty() {
            return Err(Error::Domain("prompt set is empty".into()));
        }
        if let Some(k) = self.prompts.iter().position(|p| p.len() < 2) {
            return Err(Error::Domain(format!("prompt {k} has fewer than 2 tokens")));
        }
        Ok(())
    }

    /// `count` consecutive non-overlapping chunks of `len` tokens.
    pub fn from_corpus(corpus: &TokenCorpus, count: usize, len: usize) -> Result<Self> {
        let prompts = corpus.chunks(count, len);
        if prompts.len() < count {
            return Err(Error::Domain(format!(
                "corpus `{}` holds {} tokens, too few for {count} prompts of {len}",
                corpus.id,
                corpus.len()
            )));
        }
        Self::new(format!("{}:chunks:{count}x{len}", corpus.id), prompts)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut set: PromptSet = serde_json::from_slice(&bytes)?;
        if set.nominal_len.is_none() {
            set.nominal_len = set.prompts.first().map(Vec::len);
        }
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        for (k, p) in self.prompts.iter().enumerate() {
            if let Some(&t) = p.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Domain(format!("prompt {k}: token {t} >= vocab_size {vocab}")));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let prompts = indices
            .iter()
            .map(|&k| {
                self.prompts
                    .get(k)
                    .cloned()
                    .ok_or_else(|| Error::Domain(format!("prompt index {k} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            provenance: format!("{}:subset{}", self.provenance, indices.len()),
            prompts,
            nominal_len: self.nominal_len,
        })
    }
}

/// Which positions' next-token distributions enter the KL.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Positions {
    #[default]
    Last,
    /// Mean over every position of the prompt.
    All,
}

impl FromStr for Positions {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "all" => Ok(Self::All),
            _ => Err(Error::Config(format!("unknown positions `{s}` (last|all)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Replacement,
    Interchange,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Replacement => "replacement",
            Protocol::Interchange => "interchange",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "replacement" | "repl" => Ok(Self::Replacement),
            "interchange" | "inter" => Ok(Self::Interchange),
            _ => Err(Error::Config(format!("unknown protocol `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairFilter {
    All,
    MaxGap(usize),
    Adjacent,
}

impl fmt::Display for PairFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PairFilter::All => f.write_str("all"),
            PairFilter::MaxGap(k) => write!(f, "gap:{k}"),
            PairFilter::Adjacent => f.write_str("adjacent"),
        }
    }
}

impl FromStr for PairFilter {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(Self::All),
            "adjacent" => Ok(Self::Adjacent),
            _ => {
                let k = s
                    .strip_prefix("gap:")
                    .or_else(|| s.strip_prefix("max_gap:"))
                    .and_then(|k| k.parse().ok())
                    .ok_or_else(|| Error::Config(format!("unknown pair filter `{s}` (all|adjacent|gap:k)")))?;
                Ok(Self::MaxGap(k))
            }
        }
    }
}

impl Serialize for PairFilter {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PairFilter {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Pairs `(i, j)` with `i < j` admitted by `filter`, in row-major order.
pub fn enumerate_pairs(n_layers: usize, filter: PairFilter) -> Vec<(usize, usize)> {
    let max_gap = match filter {
        PairFilter::All => usize::MAX,
        PairFilter::MaxGap(k) => k,
        PairFilter::Adjacent => 1,
    };
    (0..n_layers)
        .flat_map(|i| (i + 1..n_layers).filter(move |&j| j - i <= max_gap).map(move |j| (i, j)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub resamples: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            resamples: 1000,
            level: 0.95,
            seed: 42,
        }
    }
}

/// One layer pair under one protocol.
///
/// For replacement, `kl_ij` is the prompt-mean of `KL(p_M || p_{M_{i<-j}})`
/// and `kl_ji` the reverse direction. For interchange both hold the single
/// mutual-swap mean and every symmetrization collapses to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDistanceRecord {
    pub i: usize,
    pub j: usize,
    pub gap: usize,
    pub protocol: Protocol,
    pub kl_ij: Option<f64>,
    pub kl_ji: Option<f64>,
    pub d_max: Option<f64>,
    pub d_mean: Option<f64>,
    pub d_geo: Option<f64>,
    pub d_min: Option<f64>,
    pub class: PairClass,
    pub ci: Option<ConfidenceInterval>,
    /// Per-prompt KLs; empty for a direction whose forward pass went non-finite.
    pub prompts_ij: Vec<f64>,
    pub prompts_ji: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

impl PairDistanceRecord {
    /// The protocol's headline distance: `d_repl` (max-symmetrized) or
    /// `d_interchange`.
    pub fn distance(&self) -> Option<f64> {
        self.d_max
    }

    pub fn is_flagged(&self) -> bool {
        self.flag.is_some()
    }

    fn build(
        i: usize,
        j: usize,
        protocol: Protocol,
        ij: Option<Vec<f64>>,
        ji: Option<Vec<f64>>,
        thresholds: &ClassifierThresholds,
        bootstrap: Option<&BootstrapConfig>,
    ) -> Result<Self> {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let kl_ij = ij.as_deref().map(mean);
        let kl_ji = ji.as_deref().map(mean);
        let mut flag = None;
        let (sym, class) = match (kl_ij, kl_ji) {
            (Some(a), Some(b)) => {
                let s = symmetrize_all(a, b)?;
                (Some(s), classify_pair(s.0, thresholds))
            }
            _ => {
                let dirs: Vec<String> = [(ij.is_none(), (i, j)), (ji.is_none(), (j, i))]
                    .iter()
                    .filter(|(bad, _)| *bad)
                    .map(|(_, (a, b))| format!("{a}<-{b}"))
                    .collect();
                flag = Some(format!("non-finite {protocol} KL ({})", dirs.join(", ")));
                (None, PairClass::Flagged)
            }
        };
        let ci = match (bootstrap, &ij, &ji) {
            (Some(cfg), Some(a), Some(b)) => Some(bootstrap_with(a.len(), cfg.resamples, cfg.level, cfg.seed, |idx| {
                let ma = idx.iter().map(|&k| a[k]).sum::<f64>() / idx.len() as f64;
                let mb = idx.iter().map(|&k| b[k]).sum::<f64>() / idx.len() as f64;
                ma.max(mb)
            })?),
            _ => None,
        };
        Ok(Self {
            i,
            j,
            gap: i.abs_diff(j),
            protocol,
            kl_ij,
            kl_ji,
            d_max: sym.map(|s| s.0),
            d_mean: sym.map(|s| s.1),
            d_geo: sym.map(|s| s.2),
            d_min: sym.map(|s| s.3),
            class,
            ci,
            prompts_ij: ij.unwrap_or_default(),
            prompts_ji: ji.unwrap_or_default(),
            flag,
        })
    }
}

/// Cached-baseline distance computations for one model and prompt set.
///
/// `base` interventions (for instance `RopeOff`) are applied to the baseline
/// and to every perturbed model alike.
pub struct DistanceProbe<'a> {
    model: &'a Checkpoint,
    prompts: &'a PromptSet,
    positions: Positions,
    base: Vec<InterventionSpec>,
    baseline: Vec<Vec<Vec<f64>>>,
    thresholds: ClassifierThresholds,
    bootstrap: Option<BootstrapConfig>,
}

impl<'a> DistanceProbe<'a> {
    pub fn new(model: &'a Checkpoint, prompts: &'a PromptSet, positions: Positions) -> Result<Self> {
        Self::with_base(model, prompts, positions, Vec::new())
    }

    pub fn with_base(
        model: &'a Checkpoint,
        prompts: &'a PromptSet,
        positions: Positions,
        base: Vec<InterventionSpec>,
    ) -> Result<Self> {
        prompts.validate()?;
        prompts.check_vocab(model.config.vocab_size)?;
        let baseline = prompts
            .prompts
            .par_iter()
            .map(|p| Self::distributions(model, p, &base, positions))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            prompts,
            positions,
            base,
            baseline,
            thresholds: ClassifierThresholds::default(),
            bootstrap: None,
        })
    }

    pub fn with_thresholds(mut self, thresholds: ClassifierThresholds) -> Self {
        self.thresholds = thresholds;
        self
    }

    pub fn with_bootstrap(mut self, cfg: Option<BootstrapConfig>) -> Self {
        self.bootstrap = cfg;
        self
    }

    pub fn model(&self) -> &Checkpoint {
        self.model
    }

    pub fn prompts(&self) -> &PromptSet {
        self.prompts
    }

    pub fn thresholds(&self) -> &ClassifierThresholds {
        &self.thresholds
    }

    /// Cached baseline distributions: prompt, then position row.
    pub fn baseline(&self) -> &[Vec<Vec<f64>>] {
        &self.baseline
    }

    fn distributions(
        model: &Checkpoint,
        tokens: &[u32],
        ivs: &[InterventionSpec],
        positions: Positions,
    ) -> Result<Vec<Vec<f64>>> {
        let logits = match positions {
            Positions::Last => LogitRows::Last,
            Positions::All => LogitRows::All,
        };
        let out = forward_with(model, tokens, ivs, ForwardOptions { capture: false, logits })?;
        Ok(out.distributions())
    }

    /// Per-prompt KL from the cached baseline to the model under
    /// `base + interventions`.
    pub fn prompt_kls(&self, interventions: &[InterventionSpec]) -> Result<Vec<f64>> {
        let mut ivs = self.base.clone();
        ivs.extend_from_slice(interventions);
        self.prompts
            .prompts
            .iter()
            .zip(&self.baseline)
            .map(|(tokens, base)| {
                let rows = Self::distributions(self.model, tokens, &ivs, self.positions)?;
                let total: f64 = base.iter().zip(&rows).map(|(p, q)| kl_unchecked(p, q)).sum();
                Ok(total / rows.len() as f64)
            })
            .collect()
    }

    /// Like [`Self::prompt_kls`], but a non-finite forward becomes `None`.
    fn prompt_kls_or_flag(&self, interventions: &[InterventionSpec]) -> Result<Option<Vec<f64>>> {
        match self.prompt_kls(interventions) {
            Ok(v) if v.iter().all(|x| x.is_finite()) => Ok(Some(v)),
            Ok(_) | Err(Error::NonFinite(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }

    fn check_layers(&self, i: usize, j: usize) -> Result<()> {
        let n = self.model.config.n_layers;
        if i >= n || j >= n {
            return Err(Error::Spec(format!("pair ({i}, {j}) out of range for {n} layers")));
        }
        Ok(())
    }

    pub fn replacement(&self, i: usize, j: usize) -> Result<PairDistanceRecord> {
        self.check_layers(i, j)?;
        let ij = self.prompt_kls_or_flag(&[InterventionSpec::replace(i, j)])?;
        let ji = self.prompt_kls_or_flag(&[InterventionSpec::replace(j, i)])?;
        PairDistanceRecord::build(i, j, Protocol::Replacement, ij, ji, &self.thresholds, self.bootstrap.as_ref())
    }

    /// Symmetric by construction: `(i, j)` and `(j, i)` give identical records.
    pub fn interchange(&self, i: usize, j: usize) -> Result<PairDistanceRecord> {
        self.check_layers(i, j)?;
        let (a, b) = (i.min(j), i.max(j));
        let kls = self.prompt_kls_or_flag(&[InterventionSpec::interchange(a, b)])?;
        PairDistanceRecord::build(
            a,
            b,
            Protocol::Interchange,
            kls.clone(),
            kls,
            &self.thresholds,
            self.bootstrap.as_ref(),
        )
    }

    pub fn record(&self, protocol: Protocol, i: usize, j: usize) -> Result<PairDistanceRecord> {
        match protocol {
            Protocol::Replacement => self.replacement(i, j),
            Protocol::Interchange => self.interchange(i, j),
        }
    }

    /// Mean KL after replacing only head `head` of layer `target` with the
    /// corresponding head of layer `source`.
    pub fn head_swap(&self, target: usize, source: usize, head: usize) -> Result<f64> {
        self.check_layers(target, source)?;
        if head >= self.model.config.n_heads {
            return Err(Error::Spec(format!(
                "head {head} out of range for {} heads",
                self.model.config.n_heads
            )));
        }
        let kls = self.prompt_kls(&[InterventionSpec::HeadReplace { target, source, head }])?;
        Ok(kls.iter().sum::<f64>() / kls.len() as f64)
    }

    pub fn sweep(&self, filter: PairFilter, protocol: Protocol) -> Result<DistanceMatrix> {
        let pairs = enumerate_pairs(self.model.config.n_layers, filter);
        self.sweep_pairs(&pairs, protocol, filter.to_string())
    }

    pub fn sweep_pairs(&self, pairs: &[(usize, usize)], protocol: Protocol, label: String) -> Result<DistanceMatrix> {
        if pairs.is_empty() {
            return Err(Error::Spec(format!("pair filter `{label}` yields no pairs")));
        }
        let records = pairs
            .par_iter()
            .map(|&(i, j)| self.record(protocol, i, j))
            .collect::<Result<Vec<_>>>()?;
        Ok(DistanceMatrix::new(
            self.model.config.model_id(),
            self.model.config.n_layers,
            protocol,
            label,
            self.prompts.provenance.clone(),
            self.positions,
            self.thresholds,
            records,
        ))
    }
}

pub fn replacement_distance(
    model: &Checkpoint,
    i: usize,
    j: usize,
    prompts: &PromptSet,
    positions: Positions,
) -> Result<PairDistanceRecord> {
    DistanceProbe::new(model, prompts, positions)?.replacement(i, j)
}

pub fn interchange_distance(
    model: &Checkpoint,
    i: usize,
    j: usize,
    prompts: &PromptSet,
    positions: Positions,
) -> Result<PairDistanceRecord> {
    DistanceProbe::new(model, prompts, positions)?.interchange(i, j)
}

pub fn head_swap_distance(model: &Checkpoint, i: usize, j: usize, head: usize, prompts: &PromptSet) -> Result<f64> {
    DistanceProbe::new(model, prompts, Positions::Last)?.head_swap(i, j, head)
}

pub fn sweep_distances(
    model: &Checkpoint,
    filter: PairFilter,
    protocol: Protocol,
    prompts: &PromptSet,
    positions: Positions,
) -> Result<DistanceMatrix> {
    DistanceProbe::new(model, prompts, positions)?.sweep(filter, protocol)
}

/// Every pair record of one sweep plus summary counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub model_id: String,
    pub n_layers: usize,
    pub protocol: Protocol,
    pub pair_filter: String,
    pub prompt_provenance: String,
    pub positions: Positions,
    pub thresholds: ClassifierThresholds,
    pub records: Vec<PairDistanceRecord>,
    pub strong_count: usize,
    pub conditional_count: usize,
    pub flagged_count: usize,
    /// Spearman correlation between the max- and mean-symmetrized rankings.
    pub spearman_max_vs_mean: Option<f64>,
}

impl DistanceMatrix {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_id: String,
        n_layers: usize,
        protocol: Protocol,
        pair_filter: String,
        prompt_provenance: String,
        positions: Positions,
        thresholds: ClassifierThresholds,
        records: Vec<PairDistanceRecord>,
    ) -> Self {
        let count = |c: PairClass| records.iter().filter(|r| r.class == c).count();
        let (maxes, means): (Vec<f64>, Vec<f64>) = records
            .iter()
            .filter_map(|r| Some((r.d_max?, r.d_mean?)))
            .unzip();
        let spearman = rank_correlation(&maxes, &means, RankKind::Spearman).ok();
        Self {
            model_id,
            n_layers,
            protocol,
            pair_filter,
            prompt_provenance,
            positions,
            thresholds,
            strong_count: count(PairClass::Strong),
            conditional_count: count(PairClass::Conditional),
            flagged_count: count(PairClass::Flagged),
            spearman_max_vs_mean: spearman,
            records,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> Option<&PairDistanceRecord> {
        let (a, b) = (i.min(j), i.max(j));
        self.records.iter().find(|r| r.i == a && r.j == b)
    }

    pub fn distance(&self, i: usize, j: usize) -> Option<f64> {
        self.get(i, j).and_then(PairDistanceRecord::distance)
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.records.iter().map(|r| (r.i, r.j)).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per pair.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.9}")).unwrap_or_default();
        let mut out = String::from("i,j,gap,kl_ij,kl_ji,d_max,d_mean,d_geo,d_min,class,ci_lo,ci_hi,flag\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.i,
                r.j,
                r.gap,
                f(r.kl_ij),
                f(r.kl_ji),
                f(r.d_max),
                f(r.d_mean),
                f(r.d_geo),
                f(r.d_min),
                r.class,
                f(r.ci.map(|c| c.lo)),
                f(r.ci.map(|c| c.hi)),
                r.flag.as_deref().unwrap_or("").replace(',', ";"),
            ));
        }
        out
    }
}
