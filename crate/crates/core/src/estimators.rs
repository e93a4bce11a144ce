//! In-context counting estimators.
//!
//! All estimators predict the token following the last position of the
//! sequence. Positions are 0-based: a k-gram match is a position `p` whose
//! `k-1` preceding tokens equal the last `k-1` tokens of the sequence, and the
//! estimate is the normalised count of `x[p]` over matches.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::seqmodel::{ce_loss_vs_truth, LanguageModel, SequenceBatch};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum EstimatorVariant {
    Kgram { k: usize },
    /// Match on the tokens at the given lags (non-contiguous history).
    Subset { lags: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorKind {
    pub variant: EstimatorVariant,
    pub backoff: bool,
}

impl EstimatorKind {
    pub fn kgram(k: usize, backoff: bool) -> Result<Self> {
        if k == 0 {
            return Err(invalid("k must be >= 1"));
        }
        Ok(EstimatorKind {
            variant: EstimatorVariant::Kgram { k },
            backoff,
        })
    }

    pub fn subset(mut lags: Vec<usize>, backoff: bool) -> Result<Self> {
        lags.sort_unstable();
        if lags.contains(&0) {
            return Err(invalid("lags must be positive"));
        }
        if lags.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("lags must be distinct"));
        }
        Ok(EstimatorKind {
            variant: EstimatorVariant::Subset { lags },
            backoff,
        })
    }

    pub fn predict(&self, seq: &[usize], alphabet_size: usize) -> Result<Vec<f64>> {
        match &self.variant {
            EstimatorVariant::Kgram { k } => kgram_predict(seq, *k, alphabet_size, self.backoff),
            EstimatorVariant::Subset { lags } => {
                subset_predict(seq, lags, alphabet_size, self.backoff)
            }
        }
    }

    /// Short label used in CSV output: `k` or lags joined by `+`.
    pub fn label(&self) -> (&'static str, String) {
        match &self.variant {
            EstimatorVariant::Kgram { k } => ("kgram", k.to_string()),
            EstimatorVariant::Subset { lags } => (
                "subset",
                lags.iter().map(usize::to_string).collect::<Vec<_>>().join("+"),
            ),
        }
    }
}

/// Positions whose tokens at every lag in `lags` equal the corresponding
/// tokens preceding position `seq.len()`. Only positions where all lags fall
/// inside the sequence are considered.
pub fn lag_match_set(seq: &[usize], lags: &[usize]) -> Vec<usize> {
    let t = seq.len();
    let max_lag = lags.iter().copied().max().unwrap_or(0);
    if max_lag > t {
        return Vec::new();
    }
    (max_lag..t)
        .filter(|&p| lags.iter().all(|&h| seq[p - h] == seq[t - h]))
        .collect()
}

/// Match set of the k-gram estimator.
pub fn match_set(seq: &[usize], k: usize) -> Vec<usize> {
    let lags: Vec<usize> = (1..k).collect();
    lag_match_set(seq, &lags)
}

/// Match set when histories reaching before the start of the sequence are
/// padded with the first token. This is the set selected by the hard-attention
/// limit of the k-gram transformer construction, whose first-layer heads send
/// early positions to position 0.
pub fn padded_match_set(seq: &[usize], k: usize) -> Vec<usize> {
    let t = seq.len();
    let at = |p: usize, h: usize| if p >= h { seq[p - h] } else { seq[0] };
    (0..t)
        .filter(|&p| (1..k).all(|h| at(p, h) == at(t, h)))
        .collect()
}

fn normalized_counts(seq: &[usize], positions: &[usize], alphabet_size: usize) -> Vec<f64> {
    let mut counts = vec![0u64; alphabet_size];
    for &p in positions {
        counts[seq[p]] += 1;
    }
    let total = positions.len() as f64;
    counts.into_iter().map(|c| c as f64 / total).collect()
}

fn check_tokens(seq: &[usize], alphabet_size: usize) -> Result<()> {
    if let Some(&bad) = seq.iter().find(|&&x| x >= alphabet_size) {
        return Err(invalid(format!("token {bad} outside alphabet of size {alphabet_size}")));
    }
    Ok(())
}

/// k-gram estimate of the token following `seq`.
///
/// With `backoff`, an empty match set falls back to the (k-1)-gram and so on,
/// ending at the uniform distribution for an empty sequence.
pub fn kgram_predict(seq: &[usize], k: usize, alphabet_size: usize, backoff: bool) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    check_tokens(seq, alphabet_size)?;
    let mut k = k;
    loop {
        let m = match_set(seq, k);
        if !m.is_empty() {
            return Ok(normalized_counts(seq, &m, alphabet_size));
        }
        if !backoff {
            return Err(Error::EmptyMatchSet);
        }
        if k == 1 {
            return Ok(vec![1.0 / alphabet_size as f64; alphabet_size]);
        }
        k -= 1;
    }
}

/// k-gram counts with `pseudo` added to every token, `(n_s + pseudo) / (N + S pseudo)`.
/// An empty match set gives the uniform distribution.
pub fn kgram_predict_smoothed(seq: &[usize], k: usize, alphabet_size: usize, pseudo: f64) -> Result<Vec<f64>> {
    if k == 0 {
        return Err(invalid("k must be >= 1"));
    }
    if !(pseudo > 0.0 && pseudo.is_finite()) {
        return Err(invalid("pseudo-count must be positive"));
    }
    check_tokens(seq, alphabet_size)?;
    let m = match_set(seq, k);
    let mut counts = vec![pseudo; alphabet_size];
    for &p in &m {
        counts[seq[p]] += 1.0;
    }
    let total = m.len() as f64 + pseudo * alphabet_size as f64;
    Ok(counts.into_iter().map(|c| c / total).collect())
}

/// k-gram estimate over the padded match set (see [`padded_match_set`]).
pub fn kgram_predict_padded(seq: &[usize], k: usize, alphabet_size: usize) -> Result<Vec<f64>> {
    check_tokens(seq, alphabet_size)?;
    let m = padded_match_set(seq, k);
    if m.is_empty() {
        return Err(Error::EmptyMatchSet);
    }
    Ok(normalized_counts(seq, &m, alphabet_size))
}

/// Estimate matching the non-contiguous history at `lags`. Backoff drops the
/// largest lag.
pub fn subset_predict(seq: &[usize], lags: &[usize], alphabet_size: usize, backoff: bool) -> Result<Vec<f64>> {
    check_tokens(seq, alphabet_size)?;
    let mut lags: Vec<usize> = lags.to_vec();
    lags.sort_unstable();
    loop {
        let m = lag_match_set(seq, &lags);
        if !m.is_empty() {
            return Ok(normalized_counts(seq, &m, alphabet_size));
        }
        if !backoff {
            return Err(Error::EmptyMatchSet);
        }
        if lags.pop().is_none() {
            return Ok(vec![1.0 / alphabet_size as f64; alphabet_size]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCe {
    pub mean: f64,
    pub stderr: f64,
    pub n_sequences: usize,
}

/// Mean cross-entropy of the estimator at the final position against the true
/// next-token distribution of each sequence's source.
pub fn estimator_ce(kind: &EstimatorKind, batch: &SequenceBatch, lms: &[LanguageModel]) -> Result<EstimatorCe> {
    use rayon::prelude::*;
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let losses: Vec<f64> = batch
        .sequences
        .par_iter()
        .zip(&batch.lm_index)
        .map(|(seq, &li)| {
            let lm = &lms[li];
            let est = kind.predict(seq, lm.tensor.alphabet_size())?;
            Ok(ce_loss_vs_truth(&est, lm.tensor.next_token_probs(seq)))
        })
        .collect::<Result<_>>()?;
    Ok(mean_stderr(&losses))
}

pub(crate) fn mean_stderr(xs: &[f64]) -> EstimatorCe {
    let n = xs.len();
    let mean = crate::grad::pairwise_sum(xs) / n as f64;
    let stderr = if n > 1 {
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    EstimatorCe {
        mean,
        stderr,
        n_sequences: n,
    }
}
