//! Golden-logit fixtures: short token sequences with reference logits from
//! the framework a checkpoint was exported from.
//!
//! File layout (JSON): `model_id`, `source`, `sequences` (token ids) and
//! `logits` (one `[len][vocab]` array per sequence).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, Checkpoint};

pub const MAX_SEQUENCES: usize = 8;
pub const MAX_SEQUENCE_LEN: usize = 16;
pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenFixture {
    pub model_id: String,
    /// Framework and version that produced the reference logits.
    pub source: String,
    pub sequences: Vec<Vec<u32>>,
    pub logits: Vec<Vec<Vec<f32>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenComparison {
    pub model_id: String,
    pub per_sequence: Vec<f64>,
    pub max_abs_diff: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GoldenFixture {
    /// Records `model`'s own logits; useful for regression fixtures.
    pub fn record(model: &Checkpoint, source: impl Into<String>, sequences: Vec<Vec<u32>>) -> Result<Self> {
        let logits = sequences
            .iter()
            .map(|s| {
                let out = forward(model, s, &[], false)?;
                Ok((0..out.logits.rows()).map(|r| out.logits.row(r).to_vec()).collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let g = Self {
            model_id: model.config.model_id(),
            source: source.into(),
            sequences,
            logits,
        };
        g.validate(model.config.vocab_size)?;
        Ok(g)
    }

    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.sequences.is_empty() || self.sequences.len() > MAX_SEQUENCES {
            return Err(Error::Config(format!(
                "golden fixture needs 1..={MAX_SEQUENCES} sequences, has {}",
                self.sequences.len()
            )));
        }
        if self.logits.len() != self.sequences.len() {
            return Err(Error::Dimension(format!(
                "{} logit blocks for {} sequences",
                self.logits.len(),
                self.sequences.len()
            )));
        }
        for (k, (s, l)) in self.sequences.iter().zip(&self.logits).enumerate() {
            if s.is_empty() || s.len() > MAX_SEQUENCE_LEN {
                return Err(Error::Config(format!("golden sequence {k} has {} tokens", s.len())));
            }
            if let Some(&t) = s.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Config(format!("golden sequence {k} has token {t} >= vocab {vocab}")));
            }
            if l.len() != s.len() || l.iter().any(|r| r.len() != vocab) {
                return Err(Error::Dimension(format!(
                    "golden logits {k} are not [{}][{vocab}]",
                    s.len()
                )));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    /// Largest absolute logit difference between `model` and the reference.
    pub fn compare(&self, model: &Checkpoint, tolerance: f64) -> Result<GoldenComparison> {
        self.validate(model.config.vocab_size)?;
        let per_sequence = self
            .sequences
            .iter()
            .zip(&self.logits)
            .map(|(s, reference)| {
                let out = forward(model, s, &[], false)?;
                let mut worst = 0.0f64;
                for (t, row) in reference.iter().enumerate() {
                    for (a, b) in out.logits.row(t).iter().zip(row) {
                        let d = (*a as f64 - *b as f64).abs();
                        worst = if d.is_nan() { f64::INFINITY } else { worst.max(d) };
                    }
                }
                Ok(worst)
            })
            .collect::<Result<Vec<f64>>>()?;
        let max_abs_diff = per_sequence.iter().copied().fold(0.0, f64::max);
        Ok(GoldenComparison {
            model_id: model.config.model_id(),
            per_sequence,
            max_abs_diff,
            tolerance,
            passed: max_abs_diff < tolerance,
        })
    }
}
