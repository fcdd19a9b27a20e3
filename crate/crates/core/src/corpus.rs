//! Token corpora: a flat file of little-endian `u32` token ids plus a JSON
//! sidecar at `<path>.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSidecar {
    /// Stable identifier; evaluation contracts bind to it.
    pub id: String,
    pub vocab_size: usize,
    /// Free-text description of the source text (dataset, split, slice).
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word_count: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenCorpus {
    pub id: String,
    pub source: String,
    pub vocab_size: usize,
    pub tokens: Vec<u32>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl TokenCorpus {
    pub fn new(id: impl Into<String>, source: impl Into<String>, vocab_size: usize, tokens: Vec<u32>) -> Result<Self> {
        let c = Self {
            id: id.into(),
            source: source.into(),
            vocab_size,
            tokens,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some((pos, &bad)) = self
            .tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t as usize >= self.vocab_size)
        {
            return Err(Error::Domain(format!(
                "corpus `{}`: token {bad} at {pos} >= vocab_size {}",
                self.id, self.vocab_size
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = sidecar_path(path);
        let meta: CorpusSidecar = serde_json::from_slice(
            &std::fs::read(&side).map_err(|e| Error::io(&side, e))?,
        )?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::Header(format!(
                "{}: token file length {} is not a multiple of 4",
                path.display(),
                bytes.len()
            )));
        }
        let tokens: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if let Some(n) = meta.token_count {
            if n != tokens.len() {
                return Err(Error::Header(format!(
                    "{}: sidecar declares {n} tokens, file holds {}",
                    path.display(),
                    tokens.len()
                )));
            }
        }
        Self::new(meta.id, meta.source, meta.vocab_size, tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes: Vec<u8> = self.tokens.iter().flat_map(|t| t.to_le_bytes()).collect();
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
        let meta = CorpusSidecar {
            id: self.id.clone(),
            vocab_size: self.vocab_size,
            source: self.source.clone(),
            token_count: Some(self.tokens.len()),
            word_count: None,
            split: None,
        };
        let side = sidecar_path(path);
        std::fs::write(&side, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&side, e))
    }

    /// Leading `n` tokens (all of them when shorter).
    pub fn truncated(&self, n: usize) -> TokenCorpus {
        TokenCorpus {
            tokens: self.tokens[..n.min(self.tokens.len())].to_vec(),
            ..self.clone()
        }
    }

    /// Non-overlapping chunks of `len` tokens, at most `count` of them.
    pub fn chunks(&self, count: usize, len: usize) -> Vec<Vec<u32>> {
        self.tokens
            .chunks_exact(len.max(1))
            .take(count)
            .map(<[u32]>::to_vec)
            .collect()
    }
}
