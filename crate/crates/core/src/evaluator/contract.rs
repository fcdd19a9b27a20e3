use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A pinned perplexity evaluation: which corpus, how much of it, and how the
/// sliding window walks over it. ΔPPL is only defined between reports that
/// share a contract id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalContract {
    pub name: String,
    pub corpus_id: String,
    /// Leading tokens of the corpus to use; the whole corpus when absent.
    #[serde(default)]
    pub token_budget: Option<usize>,
    pub window: usize,
    pub stride: usize,
    #[serde(default = "default_precision")]
    pub precision: String,
    #[serde(default = "default_scoring")]
    pub scoring: String,
}

fn default_precision() -> String {
    "fp32".into()
}

fn default_scoring() -> String {
    "new-tokens-only".into()
}

pub const BUILTIN_CONTRACTS: [&str; 2] = ["wikitext-1024-512", "matched-512-256"];

impl EvalContract {
    pub fn new(name: impl Into<String>, corpus_id: impl Into<String>, window: usize, stride: usize) -> Result<Self> {
        let c = Self {
            name: name.into(),
            corpus_id: corpus_id.into(),
            token_budget: None,
            window,
            stride,
            precision: default_precision(),
            scoring: default_scoring(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_budget(mut self, tokens: usize) -> Result<Self> {
        self.token_budget = Some(tokens);
        self.validate()?;
        Ok(self)
    }

    /// Named presets bound to `corpus_id`: `wikitext-1024-512` (window 1024,
    /// stride 512) and `matched-512-256` (window 512, stride 256).
    pub fn builtin(name: &str, corpus_id: &str) -> Option<Self> {
        let (w, s) = match name {
            "wikitext-1024-512" => (1024, 512),
            "matched-512-256" => (512, 256),
            _ => return None,
        };
        Self::new(name, corpus_id, w, s).ok()
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Contract(format!("window must be >= 2, got {}", self.window)));
        }
        if self.stride == 0 || self.stride > self.window {
            return Err(Error::Contract(format!(
                "stride must satisfy 0 < stride <= window ({}), got {}",
                self.window, self.stride
            )));
        }
        if let Some(b) = self.token_budget {
            if b < self.window {
                return Err(Error::Contract(format!("token budget {b} is below the window {}", self.window)));
            }
        }
        if self.precision != "fp32" {
            return Err(Error::Contract(format!("unsupported precision `{}`", self.precision)));
        }
        if self.scoring != "new-tokens-only" {
            return Err(Error::Contract(format!("unsupported scoring rule `{}`", self.scoring)));
        }
        Ok(())
    }

    /// `name:` followed by the first 12 hex digits of the SHA-256 of the
    /// canonical JSON encoding.
    pub fn id(&self) -> String {
        let canonical = serde_json::to_vec(&serde_json::to_value(self).expect("contract serializes"))
            .expect("contract serializes");
        let digest = Sha256::digest(&canonical);
        let hex: String = digest.iter().take(6).map(|b| format!("{b:02x}")).collect();
        format!("{}:{hex}", self.name)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let c: Self = serde_json::from_slice(&bytes)?;
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(EvalContract::new("c", "x", 8, 0).is_err());
        assert!(EvalContract::new("c", "x", 8, 9).is_err());
        assert!(EvalContract::new("c", "x", 8, 8).is_ok());
        assert!(EvalContract::new("c", "x", 8, 4).unwrap().with_budget(7).is_err());
    }

    #[test]
    fn id_tracks_every_field() {
        let a = EvalContract::new("c", "x", 8, 4).unwrap();
        let b = EvalContract::new("c", "x", 8, 2).unwrap();
        let c = EvalContract::new("c", "y", 8, 4).unwrap();
        assert_eq!(a.id(), a.clone().id());
        assert_ne!(a.id(), b.id());
        assert_ne!(a.id(), c.id());
        assert!(a.id().starts_with("c:"));
        assert_eq!(a.id().len(), "c:".len() + 12);
    }

    #[test]
    fn builtins() {
        let c = EvalContract::builtin("wikitext-1024-512", "wt2-val").unwrap();
        assert_eq!((c.window, c.stride), (1024, 512));
        assert!(EvalContract::builtin("nope", "x").is_none());
    }
}
