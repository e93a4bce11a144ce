//! Explicit parameter points that implement counting estimators, checks of
//! their attention patterns, and a Monte Carlo probe of how close they are to
//! stationary.
//!
//! Block `h` of a first-layer row is the skip block for `h = 0` and head `h`
//! (0-based head index `h - 1`) otherwise. `s_j^h` denotes embedding `s_j`
//! placed in block `h`.

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{kgram_predict_padded, padded_match_set};
use crate::grad::{batch_loss_grad, GradientSet};
use crate::rng::{stream, Rng};
use crate::seqmodel::{total_variation, LanguageModel, NGramSpec};
use crate::transformer::{forward, ModelConfig, ModelParams, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum ConstructionVariant {
    Kgram { k: usize },
    MultiheadBigram,
    Subset { lags: Vec<usize>, t_fixed: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionSpec {
    #[serde(flatten)]
    pub variant: ConstructionVariant,
    pub c: f64,
    pub config: ModelConfig,
}

impl ConstructionSpec {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(invalid(format!("scale c must be positive, got {}", self.c)));
        }
        match &self.variant {
            ConstructionVariant::Kgram { k } => check_k(&self.config, *k),
            ConstructionVariant::MultiheadBigram => Ok(()),
            ConstructionVariant::Subset { lags, t_fixed } => check_subset(&self.config, lags, *t_fixed),
        }
    }

    pub fn build(&self) -> Result<ModelParams> {
        self.validate()?;
        match &self.variant {
            ConstructionVariant::Kgram { k } => build_kgram_params(&self.config, *k, self.c),
            ConstructionVariant::MultiheadBigram => build_multihead_bigram(&self.config, self.c),
            ConstructionVariant::Subset { lags, t_fixed } => build_subset_params(&self.config, lags, self.c, *t_fixed),
        }
    }
}

fn check_k(config: &ModelConfig, k: usize) -> Result<()> {
    if k < 1 || k > config.heads + 1 {
        return Err(invalid(format!("k = {k} must lie in [1, {}]", config.heads + 1)));
    }
    Ok(())
}

fn check_subset(config: &ModelConfig, lags: &[usize], t_fixed: usize) -> Result<()> {
    if lags.is_empty() || lags.contains(&0) {
        return Err(invalid("lag set must be nonempty and positive"));
    }
    let max = *lags.iter().max().unwrap();
    if max > config.heads {
        return Err(invalid(format!("lag {max} needs at least {max} heads, have {}", config.heads)));
    }
    if max >= t_fixed || t_fixed > config.t_max {
        return Err(invalid(format!("need max lag < T <= t_max, got lag {max}, T {t_fixed}")));
    }
    Ok(())
}

/// Adds `scale * sum_j s_j^row (s_j^col)^T` to a `D1 x D1` matrix.
fn add_block(mat: &mut Array2<f64>, gram: &Array2<f64>, row: usize, col: usize, scale: f64) {
    let d = gram.nrows();
    let mut view = mat.slice_mut(s![row * d..(row + 1) * d, col * d..(col + 1) * d]);
    view.scaled_add(scale, gram);
}

fn gram(params: &ModelParams) -> Array2<f64> {
    crate::grad::standard(params.embedding.t().dot(&params.embedding))
}

/// Head attending to lag `h` with logit `c`; rows before `h` attend to position 0.
fn lag_attention(t_max: usize, h: usize, c: f64) -> Array2<f64> {
    let mut a = Array2::zeros((t_max, t_max));
    for i in 0..t_max {
        let j = if i >= h { i - h } else { 0 };
        a[[i, j]] = c;
    }
    a
}

/// The point where head `h < k` copies the `(-h)`-token and the second layer
/// compares `(k-1)`-histories with score `c` per matching lag. Heads `h >= k`
/// are switched off (zero attention logits and values).
pub fn build_kgram_params(config: &ModelConfig, k: usize, c: f64) -> Result<ModelParams> {
    config.validate()?;
    check_k(config, k)?;
    if !(c > 0.0) {
        return Err(invalid("scale c must be positive"));
    }
    let mut p = ModelParams::zeros(config);
    let g = gram(&p);
    let rc = c.sqrt();
    for h in 1..k {
        p.a1[h - 1] = lag_attention(config.t_max, h, c);
        p.v1[h - 1] = g.clone();
        add_block(&mut p.k2, &g, h, h, rc);
        add_block(&mut p.q2, &g, h, h - 1, rc);
    }
    Ok(p)
}

/// Every head copies the `(-1)`-token; the query compares the current token
/// against all head blocks. The second-layer score of a match is `m c^{3/2}`.
pub fn build_multihead_bigram(config: &ModelConfig, c: f64) -> Result<ModelParams> {
    config.validate()?;
    if !(c > 0.0) {
        return Err(invalid("scale c must be positive"));
    }
    let mut p = ModelParams::zeros(config);
    let g = gram(&p);
    let rc = c.sqrt();
    for h in 1..=config.heads {
        p.a1[h - 1] = lag_attention(config.t_max, 1, c);
        p.v1[h - 1] = &g * rc;
        add_block(&mut p.k2, &g, h, h, rc);
        add_block(&mut p.q2, &g, h, 0, rc);
    }
    Ok(p)
}

/// Non-contiguous history `lags` for inputs of exactly length `t_fixed`.
///
/// Head `h` in `lags` copies the `(-h)`-token for every row except the last,
/// which instead copies the `(-(h-1))`-token so that the query carries the
/// lag set of the token to be predicted. The last key therefore always
/// matches the query.
pub fn build_subset_params(config: &ModelConfig, lags: &[usize], c: f64, t_fixed: usize) -> Result<ModelParams> {
    config.validate()?;
    check_subset(config, lags, t_fixed)?;
    if !(c > 0.0) {
        return Err(invalid("scale c must be positive"));
    }
    let mut p = ModelParams::zeros(config);
    let g = gram(&p);
    let rc = c.sqrt();
    for &h in lags {
        let mut a = Array2::zeros((config.t_max, config.t_max));
        for i in 0..t_fixed - 1 {
            let j = if i >= h { i - h } else { 0 };
            a[[i, j]] = c;
        }
        a[[t_fixed - 1, t_fixed - h]] = c;
        p.a1[h - 1] = a;
        p.v1[h - 1] = &g * rc;
        add_block(&mut p.k2, &g, h, h, rc);
        add_block(&mut p.q2, &g, h, h, rc);
    }
    p.fixed_len = Some(t_fixed);
    Ok(p)
}

/// Constants in the attention bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub first: f64,
    pub second: f64,
}

impl Default for BoundConstants {
    fn default() -> Self {
        BoundConstants { first: 10.0, second: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub layer: usize,
    /// 0-based head index for layer 1.
    pub head: Option<usize>,
    pub row: usize,
    pub col: usize,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub k: usize,
    pub c: f64,
    pub match_set: Vec<usize>,
    pub violations: Vec<Violation>,
    /// Smallest first-layer mass on the designated key over all active rows.
    pub min_first_layer_mass: f64,
    /// Largest `|a2[i] - 1/|M||` over the match set.
    pub max_match_deviation: f64,
    /// Largest `a2[i]` outside the match set.
    pub max_off_match: f64,
}

/// Checks the attention scores of the k-gram point against
/// `a1[h][i, i-h] >= 1 - K i e^{-c}` (position 0 for `i < h`),
/// `|a2[i] - 1/|M|| <= K' T e^{-c} / |M|^2` on the match set and
/// `a2[i] <= K' e^{-c} / |M|` elsewhere.
///
/// The match set is the one the construction realises: lags that reach
/// before the start of the sequence read position 0.
pub fn verify_attention_pattern(
    params: &ModelParams,
    seq: &[usize],
    k: usize,
    c: f64,
    bounds: BoundConstants,
) -> Result<AttentionReport> {
    check_k(&params.config, k)?;
    let trace = forward(params, seq)?;
    let t = seq.len();
    let m = padded_match_set(seq, k);
    if m.is_empty() {
        return Err(Error::EmptyMatchSet);
    }
    let ec = (-c).exp();
    let mut violations = Vec::new();
    let mut min_mass = 1.0f64;
    for h in 1..k {
        let probs = &trace.first.probs[h - 1];
        for i in 0..t {
            let j = if i >= h { i - h } else { 0 };
            let bound = 1.0 - bounds.first * i as f64 * ec;
            let v = probs[[i, j]];
            min_mass = min_mass.min(v);
            if v < bound {
                violations.push(Violation { layer: 1, head: Some(h - 1), row: i, col: j, value: v, bound });
            }
        }
    }
    let size = m.len() as f64;
    let mut in_match = vec![false; t];
    for &i in &m {
        in_match[i] = true;
    }
    let (mut max_dev, mut max_off) = (0.0f64, 0.0f64);
    for (i, &a) in trace.a2.iter().enumerate() {
        if in_match[i] {
            let dev = (a - 1.0 / size).abs();
            max_dev = max_dev.max(dev);
            let bound = bounds.second * t as f64 * ec / (size * size);
            if dev > bound {
                violations.push(Violation { layer: 2, head: None, row: t - 1, col: i, value: a, bound });
            }
        } else {
            max_off = max_off.max(a);
            let bound = bounds.second * ec / size;
            if a > bound {
                violations.push(Violation { layer: 2, head: None, row: t - 1, col: i, value: a, bound });
            }
        }
    }
    Ok(AttentionReport {
        k,
        c,
        match_set: m,
        violations,
        min_first_layer_mass: min_mass,
        max_match_deviation: max_dev,
        max_off_match: max_off,
    })
}

/// Summary of [`verify_corpus`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub k: usize,
    pub c: f64,
    #[serde(rename = "S")]
    pub alphabet_size: usize,
    #[serde(rename = "T")]
    pub t: usize,
    /// Sequences with a nonempty match set (the others are skipped).
    pub sequences_checked: usize,
    pub empty_match_sets: usize,
    /// Largest `|p_out - estimator|` entry over the checked sequences.
    pub max_estimator_diff: f64,
    pub violation_count: usize,
    /// The first [`MAX_REPORTED_VIOLATIONS`] violations.
    pub violations: Vec<Violation>,
    pub min_first_layer_mass: f64,
    pub max_match_deviation: f64,
    pub max_off_match: f64,
}

pub const MAX_REPORTED_VIOLATIONS: usize = 100;

/// Checks the k-gram point on `count` uniformly random length-`t` sequences
/// (sequence `i` from the stream `(seed, "verify", i)`): the output against
/// [`kgram_predict_padded`] and the attention pattern against `bounds`.
pub fn verify_corpus(
    config: &ModelConfig,
    k: usize,
    c: f64,
    t: usize,
    count: usize,
    seed: u64,
    bounds: BoundConstants,
) -> Result<CorpusReport> {
    use rand::Rng as _;
    if t < 2 || t > config.t_max {
        return Err(invalid(format!("T = {t} must lie in [2, t_max = {}]", config.t_max)));
    }
    let params = build_kgram_params(config, k, c)?;
    let s = config.alphabet_size;
    let results: Vec<Option<(f64, AttentionReport)>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, "verify", i as u64);
            let seq: Vec<usize> = (0..t).map(|_| rng.random_range(0..s)).collect();
            let report = match verify_attention_pattern(&params, &seq, k, c, bounds) {
                Ok(r) => r,
                Err(Error::EmptyMatchSet) => return Ok(None),
                Err(e) => return Err(e),
            };
            let p = forward(&params, &seq)?.p_out;
            let est = kgram_predict_padded(&seq, k, s)?;
            let diff = p.iter().zip(&est).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            Ok(Some((diff, report)))
        })
        .collect::<Result<_>>()?;
    let mut out = CorpusReport {
        k,
        c,
        alphabet_size: s,
        t,
        sequences_checked: 0,
        empty_match_sets: 0,
        max_estimator_diff: 0.0,
        violation_count: 0,
        violations: Vec::new(),
        min_first_layer_mass: 1.0,
        max_match_deviation: 0.0,
        max_off_match: 0.0,
    };
    for r in results {
        let Some((diff, rep)) = r else {
            out.empty_match_sets += 1;
            continue;
        };
        out.sequences_checked += 1;
        out.max_estimator_diff = out.max_estimator_diff.max(diff);
        out.violation_count += rep.violations.len();
        let room = MAX_REPORTED_VIOLATIONS.saturating_sub(out.violations.len());
        out.violations.extend(rep.violations.into_iter().take(room));
        out.min_first_layer_mass = out.min_first_layer_mass.min(rep.min_first_layer_mass);
        out.max_match_deviation = out.max_match_deviation.max(rep.max_match_deviation);
        out.max_off_match = out.max_off_match.max(rep.max_off_match);
    }
    Ok(out)
}

/// Sampled tasks shared by every grid point of a probe: the same LMs and the
/// same sequences (shorter lengths use prefixes).
#[derive(Debug, Clone)]
pub struct ProbeData {
    pub lms: Vec<LanguageModel>,
    pub seqs: Vec<Vec<usize>>,
}

impl ProbeData {
    pub fn sample(task: &NGramSpec, batch_size: usize, max_len: usize, seed: u64) -> Result<Self> {
        task.validate()?;
        if batch_size == 0 {
            return Err(invalid("batch size must be >= 1"));
        }
        let items: Vec<(LanguageModel, Vec<usize>)> = (0..batch_size)
            .into_par_iter()
            .map(|b| {
                let lm = LanguageModel::sample(task, &mut stream(seed, "probe-lm", b as u64))?;
                let seq = lm.sample_sequence(max_len, &mut stream(seed, "probe-seq", b as u64))?;
                Ok((lm, seq))
            })
            .collect::<Result<_>>()?;
        let (lms, seqs) = items.into_iter().unzip();
        Ok(ProbeData { lms, seqs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub k: usize,
    pub c: f64,
    #[serde(rename = "T")]
    pub t: usize,
    pub batch_size: usize,
    pub loss: f64,
    pub grad_norm_total: f64,
    pub grad_norm_a1: f64,
    pub grad_norm_v1: f64,
    pub grad_norm_k2: f64,
    pub grad_norm_q2: f64,
    /// Mean TV distance between the model output and the true conditional
    /// given the estimator's history.
    pub mean_residual_tv: f64,
    /// Mean squared Euclidean distance between the same two distributions.
    pub mean_sq_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StationarityReport {
    pub rows: Vec<ProbeRow>,
}

impl StationarityReport {
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for row in &self.rows {
            wr.serialize(row)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let rows = rd.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(StationarityReport { rows })
    }
}

/// History the residual is measured against.
fn residual_truth(lm: &LanguageModel, seq: &[usize], variant: &ConstructionVariant) -> Result<Vec<f64>> {
    match variant {
        ConstructionVariant::Kgram { k } => lm.conditional(&seq[seq.len() + 1 - k..]),
        ConstructionVariant::MultiheadBigram => lm.conditional(&seq[seq.len() - 1..]),
        ConstructionVariant::Subset { lags, .. } => subset_conditional(lm, seq, lags),
    }
}

/// True next-token distribution given only the tokens at `lags` before it.
pub fn subset_conditional(lm: &LanguageModel, seq: &[usize], lags: &[usize]) -> Result<Vec<f64>> {
    let spec = lm.tensor.spec();
    let s = spec.alphabet_size;
    let hist = spec.history_len();
    if lags.iter().any(|&h| h == 0 || h > hist || h > seq.len()) {
        return Err(invalid(format!("lags must lie in [1, {}]", hist.min(seq.len()))));
    }
    let mut out = vec![0.0; s];
    let mut total = 0.0;
    for (state, &w) in lm.stationary.pi.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let ok = lags.iter().all(|&h| {
            let digit = (state / s.pow((h - 1) as u32)) % s;
            digit == seq[seq.len() - h]
        });
        if ok {
            total += w;
            for (o, &p) in out.iter_mut().zip(lm.tensor.row(state)) {
                *o += w * p;
            }
        }
    }
    if !(total > 0.0) {
        return Err(Error::DegenerateHistory(total));
    }
    out.iter_mut().for_each(|x| *x /= total);
    Ok(out)
}

/// Population-gradient estimate at `params` on length-`t` prefixes of `data`.
pub fn probe_point(
    params: &ModelParams,
    data: &ProbeData,
    t: usize,
    variant: &ConstructionVariant,
) -> Result<(GradientSet, f64, f64)> {
    let seqs: Vec<Vec<usize>> = data.seqs.iter().map(|s| s[..t].to_vec()).collect();
    let truths: Vec<&[f64]> = data
        .lms
        .iter()
        .zip(&seqs)
        .map(|(lm, s)| lm.tensor.next_token_probs(s))
        .collect();
    let grad = batch_loss_grad(params, &seqs, &truths)?;
    let residuals: Vec<(f64, f64)> = data
        .lms
        .par_iter()
        .zip(seqs.par_iter())
        .map(|(lm, seq)| {
            let p = forward(params, seq)?.p_out;
            let truth = residual_truth(lm, seq, variant)?;
            let sq: f64 = p.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum();
            Ok((total_variation(&p, &truth), sq))
        })
        .collect::<Result<_>>()?;
    let n = residuals.len() as f64;
    let tv: Vec<f64> = residuals.iter().map(|r| r.0).collect();
    let sq: Vec<f64> = residuals.iter().map(|r| r.1).collect();
    Ok((grad, crate::grad::pairwise_sum(&tv) / n, crate::grad::pairwise_sum(&sq) / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub task: NGramSpec,
    pub heads: usize,
    pub variant: ConstructionVariant,
    pub cs: Vec<f64>,
    pub ts: Vec<usize>,
    pub batch_size: usize,
    pub seed: u64,
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        if self.cs.is_empty() || self.ts.is_empty() {
            return Err(invalid("probe grid must be nonempty"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be >= 1"));
        }
        if self.cs.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(invalid("every c must be positive"));
        }
        let min_t = *self.ts.iter().min().unwrap();
        if min_t < self.task.n.max(2) {
            return Err(invalid(format!("T = {min_t} is shorter than the source order")));
        }
        self.model_config(min_t)?;
        Ok(())
    }

    fn model_config(&self, t_max: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig::new(self.task.alphabet_size, self.heads, t_max)?;
        let spec = ConstructionSpec { variant: self.variant.clone(), c: 1.0, config: cfg.clone() };
        if let ConstructionVariant::Subset { .. } = self.variant {
            // the fixed length is set per grid point
            return Ok(cfg);
        }
        spec.validate()?;
        Ok(cfg)
    }

    /// `k` reported in the rows: the estimator order, or `max(lags) + 1`.
    fn k(&self) -> usize {
        match &self.variant {
            ConstructionVariant::Kgram { k } => *k,
            ConstructionVariant::MultiheadBigram => 2,
            ConstructionVariant::Subset { lags, .. } => lags.iter().max().copied().unwrap_or(0) + 1,
        }
    }
}

/// Gradient norms at the construction over a `c x T` grid, with the same
/// tasks and sequences at every grid point.
pub fn stationarity_probe(config: &ProbeConfig) -> Result<StationarityReport> {
    config.validate()?;
    let max_t = *config.ts.iter().max().unwrap();
    let data = ProbeData::sample(&config.task, config.batch_size, max_t, config.seed)?;
    let cfg = config.model_config(max_t)?;
    let mut rows = Vec::new();
    for &t in &config.ts {
        for &c in &config.cs {
            let variant = match &config.variant {
                ConstructionVariant::Subset { lags, .. } => ConstructionVariant::Subset { lags: lags.clone(), t_fixed: t },
                v => v.clone(),
            };
            let params = ConstructionSpec { variant: variant.clone(), c, config: cfg.clone() }.build()?;
            let (g, tv, sq) = probe_point(&params, &data, t, &variant)?;
            rows.push(row_from(config.k(), c, t, config.batch_size, &g, tv, sq));
        }
    }
    Ok(StationarityReport { rows })
}

pub(crate) fn row_from(k: usize, c: f64, t: usize, batch_size: usize, g: &GradientSet, tv: f64, sq: f64) -> ProbeRow {
    let [a1, v1, k2, q2] = g.group_norms();
    ProbeRow {
        k,
        c,
        t,
        batch_size,
        loss: g.loss,
        grad_norm_total: g.norm(),
        grad_norm_a1: a1,
        grad_norm_v1: v1,
        grad_norm_k2: k2,
        grad_norm_q2: q2,
        mean_residual_tv: tv,
        mean_sq_residual: sq,
    }
}

/// Gaussian parameters rescaled so that every group has the Frobenius norm
/// of the same group of `reference`.
pub fn matched_random_params(reference: &ModelParams, rng: &mut Rng) -> ModelParams {
    let mut p = ModelParams::gaussian(&reference.config, |_| 1.0, rng);
    p.fixed_len = reference.fixed_len;
    for g in ParamGroup::ALL {
        let target = reference.group_norm(g);
        let have = p.group_norm(g);
        let factor = if have > 0.0 { target / have } else { 0.0 };
        for slice in p.group_slices_mut(g) {
            slice.iter_mut().for_each(|x| *x *= factor);
        }
    }
    p
}
