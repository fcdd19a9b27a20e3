use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::contract::EvalContract;
use super::stats::{bootstrap_ci, ConfidenceInterval};
use crate::corpus::TokenCorpus;
use crate::error::{Error, Result};
use crate::model::{forward_with, Checkpoint, ForwardOptions, InterventionSpec, LogitRows};
use crate::tensor::log_prob;

/// One evaluation window: tokens `[start, end)` are fed to the model and the
/// targets at positions `[score_from, end)` are scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpan {
    pub start: usize,
    pub end: usize,
    pub score_from: usize,
}

impl WindowSpan {
    pub fn scored(&self) -> usize {
        self.end - self.score_from
    }
}

/// Windows start at multiples of `stride`. The first scores positions
/// `1..window`, later ones only the tokens no earlier window scored (a
/// window's first token has no context and is never scored). When the
/// last stride-aligned window stops short of the end, one more window ending
/// at `len` scores the remainder with full left context.
pub fn window_schedule(len: usize, window: usize, stride: usize) -> Result<Vec<WindowSpan>> {
    if stride == 0 || stride > window {
        return Err(Error::Contract(format!("invalid stride {stride} for window {window}")));
    }
    if len < window {
        return Err(Error::Contract(format!("corpus has {len} tokens, fewer than the window {window}")));
    }
    let mut spans = Vec::new();
    let mut scored_to = 1;
    let mut start = 0;
    while start + window <= len {
        let end = start + window;
        spans.push(WindowSpan {
            start,
            end,
            score_from: scored_to.max(start + 1),
        });
        scored_to = end;
        start += stride;
    }
    if scored_to < len {
        spans.push(WindowSpan {
            start: len - window,
            end: len,
            score_from: scored_to,
        });
    }
    Ok(spans)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PplReport {
    pub contract_id: String,
    pub ppl: f64,
    /// Token-weighted mean negative log-likelihood, in nats.
    pub nll: f64,
    pub windows: usize,
    pub window_nlls: Vec<f64>,
    pub window_tokens: Vec<usize>,
    pub scored_tokens: usize,
    /// Whether a final window was added after the last stride-aligned one.
    pub trailing_window: bool,
    pub interventions: Vec<String>,
    pub ci: Option<ConfidenceInterval>,
}

impl PplReport {
    /// Adds a window-level bootstrap CI on perplexity (token-weighted).
    pub fn with_ci(mut self, resamples: usize, level: f64, seed: u64) -> Result<Self> {
        let w: Vec<f64> = self.window_tokens.iter().map(|&n| n as f64).collect();
        let ci = bootstrap_ci(&self.window_nlls, Some(&w), resamples, level, seed)?;
        // Mapping the NLL interval through exp keeps the point inside.
        let mut ci = ci.map(f64::exp);
        ci.point = self.ppl;
        ci.lo = ci.lo.min(self.ppl);
        ci.hi = ci.hi.max(self.ppl);
        self.ci = Some(ci);
        Ok(self)
    }

    /// `(PPL / PPL_0 - 1) * 100`.
    pub fn delta_pct(&self, baseline: &PplReport) -> f64 {
        (self.ppl / baseline.ppl - 1.0) * 100.0
    }
}

/// Corpus tokens the contract evaluates on.
fn contract_tokens<'c>(corpus: &'c TokenCorpus, contract: &EvalContract) -> Result<&'c [u32]> {
    contract.validate()?;
    if corpus.id != contract.corpus_id {
        return Err(Error::Contract(format!(
            "contract `{}` is bound to corpus `{}`, got `{}`",
            contract.name, contract.corpus_id, corpus.id
        )));
    }
    let n = contract.token_budget.map_or(corpus.len(), |b| b.min(corpus.len()));
    Ok(&corpus.tokens[..n])
}

pub fn sliding_window_ppl(
    model: &Checkpoint,
    corpus: &TokenCorpus,
    contract: &EvalContract,
    interventions: &[InterventionSpec],
) -> Result<PplReport> {
    let tokens = contract_tokens(corpus, contract)?;
    let spans = window_schedule(tokens.len(), contract.window, contract.stride)?;
    let sums = spans
        .par_iter()
        .map(|s| window_nll_sum(model, &tokens[s.start..s.end], s.score_from - s.start, interventions))
        .collect::<Result<Vec<f64>>>()?;
    let window_tokens: Vec<usize> = spans.iter().map(WindowSpan::scored).collect();
    let scored: usize = window_tokens.iter().sum();
    let total: f64 = sums.iter().sum();
    let nll = total / scored as f64;
    if !nll.is_finite() {
        return Err(Error::NonFinite(format!("perplexity under contract `{}`", contract.id())));
    }
    let stride_aligned = (tokens.len() - contract.window) / contract.stride + 1;
    Ok(PplReport {
        contract_id: contract.id(),
        ppl: nll.exp(),
        nll,
        windows: spans.len(),
        window_nlls: sums.iter().zip(&window_tokens).map(|(s, &n)| s / n as f64).collect(),
        window_tokens,
        scored_tokens: scored,
        trailing_window: spans.len() > stride_aligned,
        interventions: interventions.iter().map(ToString::to_string).collect(),
        ci: None,
    })
}

/// Summed NLL of the targets at window offsets `from..len`.
fn window_nll_sum(model: &Checkpoint, window: &[u32], from: usize, ivs: &[InterventionSpec]) -> Result<f64> {
    let out = forward_with(
        model,
        window,
        ivs,
        ForwardOptions {
            capture: false,
            logits: LogitRows::All,
        },
    )?;
    let mut sum = 0.0;
    for t in from..window.len() {
        sum -= log_prob(out.logits.row(t - 1), window[t] as usize);
    }
    Ok(sum)
}

/// PPL of `model` under `interventions`, and its ΔPPL% against `baseline`.
/// Refuses to compare across contracts.
pub fn evaluate_intervention(
    model: &Checkpoint,
    corpus: &TokenCorpus,
    interventions: &[InterventionSpec],
    contract: &EvalContract,
    baseline: &PplReport,
) -> Result<(PplReport, f64)> {
    let id = contract.id();
    if baseline.contract_id != id {
        return Err(Error::ContractMismatch {
            baseline: baseline.contract_id.clone(),
            current: id,
        });
    }
    let report = sliding_window_ppl(model, corpus, contract, interventions)?;
    let delta = report.delta_pct(baseline);
    Ok((report, delta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_covers_every_target_once() {
        for (len, w, s) in [(10, 4, 2), (11, 4, 2), (8, 8, 8), (9, 8, 8), (100, 16, 5), (17, 4, 4)] {
            let spans = window_schedule(len, w, s).unwrap();
            let mut seen = vec![0; len];
            for sp in &spans {
                assert_eq!(sp.end - sp.start, w);
                assert!(sp.score_from > sp.start);
                for t in sp.score_from..sp.end {
                    seen[t] += 1;
                }
            }
            assert_eq!(seen[0], 0);
            assert!(seen.iter().all(|&c| c <= 1));
            if s < w {
                assert!(seen[1..].iter().all(|&c| c == 1), "{len} {w} {s}");
            }
        }
    }

    #[test]
    fn schedule_shape() {
        let spans = window_schedule(10, 4, 2).unwrap();
        let starts: Vec<usize> = spans.iter().map(|s| s.start).collect();
        assert_eq!(starts, vec![0, 2, 4, 6]);
        assert_eq!(spans[0].scored(), 3);
        assert!(spans[1..].iter().all(|s| s.scored() == 2));
        let tail = window_schedule(11, 4, 2).unwrap();
        assert_eq!(tail.last().unwrap().start, 7);
        assert_eq!(tail.last().unwrap().scored(), 1);
        assert!(window_schedule(3, 4, 2).is_err());
    }
}
