//! Layer-level interventions and their resolution into an execution plan.
//!
//! All indices name ORIGINAL layer slots. Interventions are applied in list
//! order on top of the identity routing; `Delete` removes slots last, so a
//! deletion never shifts the indices seen by the other interventions.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, LayerWeights};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InterventionSpec {
    /// Slot `target` executes layer `source`'s weights (`M_{target<-source}`).
    Replace { target: usize, source: usize },
    /// Slots `i` and `j` exchange weights; each layer still runs once.
    Interchange { i: usize, j: usize },
    /// Remove the listed slots from the executed stack.
    Delete { layers: Vec<usize> },
    /// Both slots execute `(θ_i + θ_j) / 2`.
    AverageMerge { i: usize, j: usize },
    /// Every slot in `positions` executes `source`'s weights.
    Share { source: usize, positions: Vec<usize> },
    /// Head `head` of slot `target` computes with `source`'s Q/K/V/O slices
    /// (and its QK-norm gains, when present).
    HeadReplace {
        target: usize,
        source: usize,
        head: usize,
    },
    /// Rotary angles forced to zero.
    RopeOff,
}

impl InterventionSpec {
    pub fn interchange(i: usize, j: usize) -> Self {
        Self::Interchange { i, j }
    }

    pub fn replace(target: usize, source: usize) -> Self {
        Self::Replace { target, source }
    }

    pub fn delete(layers: impl IntoIterator<Item = usize>) -> Self {
        Self::Delete {
            layers: layers.into_iter().collect(),
        }
    }

    fn indices(&self) -> Vec<usize> {
        match self {
            Self::Replace { target, source } => vec![*target, *source],
            Self::Interchange { i, j } | Self::AverageMerge { i, j } => vec![*i, *j],
            Self::Delete { layers } => layers.clone(),
            Self::Share { source, positions } => {
                let mut v = positions.clone();
                v.push(*source);
                v
            }
            Self::HeadReplace { target, source, .. } => vec![*target, *source],
            Self::RopeOff => vec![],
        }
    }
}

impl fmt::Display for InterventionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[usize]| {
            v.iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        match self {
            Self::Replace { target, source } => write!(f, "replace:{target}<-{source}"),
            Self::Interchange { i, j } => write!(f, "interchange:{i},{j}"),
            Self::Delete { layers } => write!(f, "delete:{}", join(layers)),
            Self::AverageMerge { i, j } => write!(f, "average:{i},{j}"),
            Self::Share { source, positions } => write!(f, "share:{source}@{}", join(positions)),
            Self::HeadReplace {
                target,
                source,
                head,
            } => write!(f, "head:{target}<-{source}#{head}"),
            Self::RopeOff => write!(f, "rope-off"),
        }
    }
}

/// Parses the compact textual form used by the CLI and Python bindings:
/// `replace:3<-5`, `interchange:4,5`, `delete:1,2`, `average:4,5`,
/// `share:4@4,5`, `head:4<-5#2`, `rope-off`.
impl FromStr for InterventionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Spec(format!("cannot parse intervention `{s}`"));
        let num = |t: &str| t.trim().parse::<usize>().map_err(|_| bad());
        let list = |t: &str| -> Result<Vec<usize>> {
            if t.trim().is_empty() {
                return Ok(vec![]);
            }
            t.split(',').map(num).collect()
        };
        let s = s.trim();
        if s == "rope-off" || s == "rope_off" {
            return Ok(Self::RopeOff);
        }
        let (kind, rest) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "replace" => {
                let (t, src) = rest.split_once("<-").ok_or_else(bad)?;
                Ok(Self::Replace {
                    target: num(t)?,
                    source: num(src)?,
                })
            }
            "interchange" | "average" => {
                let v = list(rest)?;
                if v.len() != 2 {
                    return Err(bad());
                }
                Ok(if kind == "interchange" {
                    Self::Interchange { i: v[0], j: v[1] }
                } else {
                    Self::AverageMerge { i: v[0], j: v[1] }
                })
            }
            "delete" => Ok(Self::Delete { layers: list(rest)? }),
            "share" => {
                let (src, pos) = rest.split_once('@').ok_or_else(bad)?;
                Ok(Self::Share {
                    source: num(src)?,
                    positions: list(pos)?,
                })
            }
            "head" => {
                let (t, rest) = rest.split_once("<-").ok_or_else(bad)?;
                let (src, h) = rest.split_once('#').ok_or_else(bad)?;
                Ok(Self::HeadReplace {
                    target: num(t)?,
                    source: num(src)?,
                    head: num(h)?,
                })
            }
            _ => Err(bad()),
        }
    }
}

/// Which weights a slot executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightSource {
    Layer(usize),
    /// Elementwise mean of two layers (stored in the plan).
    Averaged(usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    /// Original depth position of this slot.
    pub position: usize,
    pub source: WeightSource,
    /// `(head, source layer)` overrides applied on top of `source`.
    pub head_overrides: Vec<(usize, usize)>,
}

/// Resolved routing of weights to executed block slots for one forward call.
#[derive(Debug, Clone)]
pub struct ExecutionPlan {
    pub slots: Vec<Slot>,
    pub rope_enabled: bool,
    averaged: HashMap<(usize, usize), LayerWeights>,
}

impl ExecutionPlan {
    pub fn identity(n_layers: usize) -> Self {
        Self {
            slots: (0..n_layers)
                .map(|p| Slot {
                    position: p,
                    source: WeightSource::Layer(p),
                    head_overrides: vec![],
                })
                .collect(),
            rope_enabled: true,
            averaged: HashMap::new(),
        }
    }

    pub fn resolve(model: &Checkpoint, interventions: &[InterventionSpec]) -> Result<Self> {
        let n = model.config.n_layers;
        let mut plan = Self::identity(n);
        let mut deleted = BTreeSet::new();

        for iv in interventions {
            if let Some(bad) = iv.indices().into_iter().find(|&k| k >= n) {
                return Err(Error::Spec(format!(
                    "{iv}: layer index {bad} out of range for {n} layers"
                )));
            }
            if let InterventionSpec::Delete { layers } = iv {
                for &l in layers {
                    if !deleted.insert(l) {
                        return Err(Error::Spec(format!("{iv}: layer {l} listed twice")));
                    }
                }
            }
        }
        for iv in interventions {
            if matches!(iv, InterventionSpec::Delete { .. }) {
                continue;
            }
            if let Some(l) = iv.indices().into_iter().find(|k| deleted.contains(k)) {
                return Err(Error::Spec(format!(
                    "{iv} conflicts with deletion of layer {l}"
                )));
            }
        }

        for iv in interventions {
            match *iv {
                InterventionSpec::Replace { target, source } => {
                    plan.slots[target].source = WeightSource::Layer(source);
                    plan.slots[target].head_overrides.clear();
                }
                InterventionSpec::Interchange { i, j } => {
                    let (a, b) = (plan.slots[i].clone(), plan.slots[j].clone());
                    plan.slots[i].source = b.source;
                    plan.slots[i].head_overrides = b.head_overrides;
                    plan.slots[j].source = a.source;
                    plan.slots[j].head_overrides = a.head_overrides;
                }
                InterventionSpec::AverageMerge { i, j } => {
                    let key = (i.min(j), i.max(j));
                    plan.averaged.entry(key).or_insert_with(|| {
                        LayerWeights::average(&model.layers[key.0], &model.layers[key.1])
                    });
                    for k in [i, j] {
                        plan.slots[k].source = WeightSource::Averaged(key.0, key.1);
                        plan.slots[k].head_overrides.clear();
                    }
                }
                InterventionSpec::Share {
                    source,
                    ref positions,
                } => {
                    if positions.is_empty() {
                        return Err(Error::Spec(format!("{iv}: empty position set")));
                    }
                    for &p in positions {
                        plan.slots[p].source = WeightSource::Layer(source);
                        plan.slots[p].head_overrides.clear();
                    }
                }
                InterventionSpec::HeadReplace {
                    target,
                    source,
                    head,
                } => {
                    if head >= model.config.n_heads {
                        return Err(Error::Spec(format!(
                            "{iv}: head {head} out of range for {} heads",
                            model.config.n_heads
                        )));
                    }
                    let ov = &mut plan.slots[target].head_overrides;
                    ov.retain(|&(h, _)| h != head);
                    ov.push((head, source));
                    ov.sort_unstable();
                }
                InterventionSpec::RopeOff => plan.rope_enabled = false,
                InterventionSpec::Delete { .. } => {}
            }
        }

        plan.slots.retain(|s| !deleted.contains(&s.position));
        if plan.slots.is_empty() {
            return Err(Error::Spec("cannot delete every layer".into()));
        }
        Ok(plan)
    }

    pub fn weights<'a>(&'a self, model: &'a Checkpoint, source: WeightSource) -> &'a LayerWeights {
        match source {
            WeightSource::Layer(l) => &model.layers[l],
            WeightSource::Averaged(a, b) => &self.averaged[&(a, b)],
        }
    }
}
