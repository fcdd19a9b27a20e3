//! Resampling and rank statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceInterval {
    pub lo: f64,
    pub hi: f64,
    pub point: f64,
    pub level: f64,
    pub resamples: usize,
    /// Fewer than two samples: the interval collapses to the point estimate.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl ConfidenceInterval {
    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    /// Applies a monotone increasing map to every endpoint.
    pub fn map(self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            lo: f(self.lo),
            hi: f(self.hi),
            point: f(self.point),
            ..self
        }
    }
}

/// Linear-interpolated quantile of sorted data (the "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(quantile_sorted(&v, 0.5))
}

fn weighted_mean(samples: &[f64], weights: Option<&[f64]>, idx: impl Iterator<Item = usize>) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in idx {
        let w = weights.map_or(1.0, |w| w[i]);
        num += w * samples[i];
        den += w;
    }
    num / den
}

/// Percentile bootstrap interval of an arbitrary statistic of `n` items.
///
/// `stat` receives the resampled item indices (with repetition). The
/// reported interval is widened, if necessary, to contain the full-sample
/// point estimate.
pub fn bootstrap_with(
    n: usize,
    resamples: usize,
    level: f64,
    seed: u64,
    stat: impl Fn(&[usize]) -> f64,
) -> Result<ConfidenceInterval> {
    if n == 0 {
        return Err(Error::Domain("bootstrap of an empty sample".into()));
    }
    if resamples < 100 {
        return Err(Error::Domain(format!("bootstrap needs >= 100 resamples, got {resamples}")));
    }
    if !(0.0 < level && level < 1.0) {
        return Err(Error::Domain(format!("confidence level must be in (0, 1), got {level}")));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = stat(&all);
    if n == 1 {
        return Ok(ConfidenceInterval {
            lo: point,
            hi: point,
            point,
            level,
            resamples,
            degenerate: true,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = vec![0usize; n];
    let mut stats: Vec<f64> = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        for slot in idx.iter_mut() {
            *slot = rng.random_range(0..n);
        }
        stats.push(stat(&idx));
    }
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - level) / 2.0;
    let lo = quantile_sorted(&stats, alpha).min(point);
    let hi = quantile_sorted(&stats, 1.0 - alpha).max(point);
    Ok(ConfidenceInterval {
        lo,
        hi,
        point,
        level,
        resamples,
        degenerate: false,
    })
}

/// Percentile bootstrap CI of the (optionally weighted) mean of `samples`.
///
/// Deterministic for a given seed. PPL intervals are obtained by mapping the
/// NLL interval through `exp`.
pub fn bootstrap_ci(
    samples: &[f64],
    weights: Option<&[f64]>,
    resamples: usize,
    level: f64,
    seed: u64,
) -> Result<ConfidenceInterval> {
    if let Some(w) = weights {
        if w.len() != samples.len() {
            return Err(Error::Dimension(format!(
                "{} samples but {} weights",
                samples.len(),
                w.len()
            )));
        }
        if w.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::Domain("bootstrap weights must be positive".into()));
        }
    }
    bootstrap_with(samples.len(), resamples, level, seed, |idx| {
        weighted_mean(samples, weights, idx.iter().copied())
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankKind {
    Spearman,
    Kendall,
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; v.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && v[order[end]] == v[order[start]] {
            end += 1;
        }
        let avg = (start + 1 + end) as f64 / 2.0;
        for &k in &order[start..end] {
            ranks[k] = avg;
        }
        start = end;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::Domain("rank correlation of a constant vector is undefined".into()));
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

fn tie_pairs(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let mut total = 0.0;
    let mut i = 0;
    while i < s.len() {
        let mut j = i + 1;
        while j < s.len() && s[j] == s[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        total += t * (t - 1.0) / 2.0;
        i = j;
    }
    total
}

/// Spearman ρ (Pearson on average ranks) or Kendall τ-b.
pub fn rank_correlation(a: &[f64], b: &[f64], kind: RankKind) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "rank_correlation: lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Domain("rank_correlation needs at least 2 items".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rank_correlation input".into()));
    }
    match kind {
        RankKind::Spearman => pearson(&average_ranks(a), &average_ranks(b)),
        RankKind::Kendall => {
            let n = a.len();
            let mut s = 0.0f64;
            for i in 0..n {
                for j in i + 1..n {
                    let da = (a[i] - a[j]).partial_cmp(&0.0).map_or(0.0, |o| o as i8 as f64);
                    let db = (b[i] - b[j]).partial_cmp(&0.0).map_or(0.0, |o| o as i8 as f64);
                    s += da * db;
                }
            }
            let n0 = (n * (n - 1)) as f64 / 2.0;
            let denom = ((n0 - tie_pairs(a)) * (n0 - tie_pairs(b))).sqrt();
            if denom == 0.0 {
                return Err(Error::Domain("rank correlation of a constant vector is undefined".into()));
            }
            Ok((s / denom).clamp(-1.0, 1.0))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    /// Zeros are dropped before testing.
    pub zeros: usize,
    /// `P(X >= positive)` under Binomial(n, 1/2).
    pub p_one_sided: f64,
    pub p_two_sided: f64,
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    if n <= 120 {
        // Exact integer binomials; one rounding on conversion.
        let mut c: u128 = 1;
        let mut sum: u128 = 0;
        for i in 0..=n {
            if i > 0 {
                c = c * (n - i + 1) as u128 / i as u128;
            }
            if i >= k {
                sum += c;
            }
        }
        return sum as f64 / 2f64.powi(n as i32);
    }
    let ln2n = n as f64 * std::f64::consts::LN_2;
    // ln C(n, i) accumulated incrementally.
    let mut ln_c = 0.0f64;
    let mut terms = Vec::with_capacity(n + 1);
    for i in 0..=n {
        if i > 0 {
            ln_c += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= k {
            terms.push((ln_c - ln2n).exp());
        }
    }
    // Sum smallest first.
    terms.sort_by(f64::total_cmp);
    terms.iter().sum::<f64>().min(1.0)
}

/// Exact binomial sign test of `deltas` against a median of zero.
pub fn sign_test(deltas: &[f64]) -> Result<SignTest> {
    if deltas.iter().any(|d| d.is_nan()) {
        return Err(Error::NonFinite("sign_test input contains NaN".into()));
    }
    let positive = deltas.iter().filter(|&&d| d > 0.0).count();
    let negative = deltas.iter().filter(|&&d| d < 0.0).count();
    let zeros = deltas.len() - positive - negative;
    let n = positive + negative;
    if n == 0 {
        return Err(Error::Domain("sign test is undefined when every delta is zero".into()));
    }
    let upper = binomial_upper_tail(n, positive);
    let lower = binomial_upper_tail(n, n - positive);
    Ok(SignTest {
        positive,
        negative,
        zeros,
        p_one_sided: upper,
        p_two_sided: (2.0 * upper.min(lower)).min(1.0),
    })
}
