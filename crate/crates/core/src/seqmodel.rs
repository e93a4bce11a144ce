//! Ground-truth n-gram sources.
//!
//! Tokens are `0..S`. A history of length `n-1` is encoded in base `S` with
//! the most recent token as the least significant digit, so appending a token
//! to a lifted state is `(state % S^(n-2)) * S + token`.

use rand::Rng as _;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Probability floor used by every cross-entropy computation in the crate.
pub const PROB_FLOOR: f64 = 1e-12;

pub const DEFAULT_STATIONARY_TOL: f64 = 1e-12;
pub const DEFAULT_STATIONARY_MAX_ITERS: usize = 1_000_000;
/// Non-improving steps after which power iteration treats the residual as round-off.
const STALL_STEPS: usize = 64;
const RATE_WINDOW: usize = 8;
const ENVELOPE: usize = 4;
/// Plain power steps before falling back to repeated squaring.
const SQUARING_AFTER: usize = 20_000;
/// Largest state count for which the dense squaring fallback is used.
const DENSE_LIMIT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NGramSpec {
    #[serde(rename = "S")]
    pub alphabet_size: usize,
    pub n: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl NGramSpec {
    pub fn new(alphabet_size: usize, n: usize, alpha: f64, seed: u64) -> Result<Self> {
        let spec = NGramSpec {
            alphabet_size,
            n,
            alpha,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 {
            return Err(invalid(format!("alphabet size must be >= 2, got {}", self.alphabet_size)));
        }
        if self.n < 1 {
            return Err(invalid("order n must be >= 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("dirichlet alpha must be positive, got {}", self.alpha)));
        }
        if self.num_histories().is_none() {
            return Err(invalid("S^(n-1) overflows"));
        }
        Ok(())
    }

    /// `S^(n-1)`, the number of rows of the transition tensor.
    pub fn num_histories(&self) -> Option<usize> {
        self.alphabet_size.checked_pow(u32::try_from(self.n - 1).ok()?)
    }

    pub fn history_len(&self) -> usize {
        self.n - 1
    }
}

/// Base-`S` index of a token window, oldest token first.
pub fn history_index(tokens: &[usize], alphabet_size: usize) -> usize {
    tokens.iter().fold(0, |acc, &t| acc * alphabet_size + t)
}

/// Inverse of [`history_index`] for a window of length `len`.
pub fn decode_history(mut index: usize, len: usize, alphabet_size: usize) -> Vec<usize> {
    let mut out = vec![0; len];
    for slot in out.iter_mut().rev() {
        *slot = index % alphabet_size;
        index /= alphabet_size;
    }
    out
}

/// Row-stochastic `S^(n-1) x S` table of next-token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionTensor {
    spec: NGramSpec,
    rows: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TensorJson {
    spec: NGramSpec,
    rows: Vec<Vec<f64>>,
}

impl Serialize for TransitionTensor {
    fn serialize<Ser: serde::Serializer>(&self, s: Ser) -> std::result::Result<Ser::Ok, Ser::Error> {
        TensorJson {
            spec: self.spec.clone(),
            rows: self.rows().map(<[f64]>::to_vec).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TransitionTensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = TensorJson::deserialize(d)?;
        TransitionTensor::from_rows(raw.spec, raw.rows).map_err(serde::de::Error::custom)
    }
}

impl TransitionTensor {
    /// Builds a tensor from explicit rows, checking shape and stochasticity.
    pub fn from_rows(spec: NGramSpec, rows: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        let s = spec.alphabet_size;
        let expected = spec.num_histories().unwrap();
        if rows.len() != expected {
            return Err(invalid(format!("expected {expected} rows, got {}", rows.len())));
        }
        for (i, row) in rows.iter().enumerate() {
            if row.len() != s {
                return Err(invalid(format!("row {i} has length {}, expected {s}", row.len())));
            }
            if row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(invalid(format!("row {i} has entries outside [0,1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > 1e-12 {
                return Err(invalid(format!("row {i} sums to {total}")));
            }
        }
        Ok(TransitionTensor {
            spec,
            rows: rows.into_iter().flatten().collect(),
        })
    }

    pub fn spec(&self) -> &NGramSpec {
        &self.spec
    }

    pub fn alphabet_size(&self) -> usize {
        self.spec.alphabet_size
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len() / self.spec.alphabet_size
    }

    pub fn row(&self, history: usize) -> &[f64] {
        let s = self.spec.alphabet_size;
        &self.rows[history * s..(history + 1) * s]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.rows.chunks(self.spec.alphabet_size)
    }

    /// Next-token distribution after `seq`, read from its last `n-1` tokens.
    pub fn next_token_probs(&self, seq: &[usize]) -> &[f64] {
        let h = self.spec.history_len();
        assert!(seq.len() >= h, "sequence shorter than the history length");
        self.row(history_index(&seq[seq.len() - h..], self.spec.alphabet_size))
    }
}

/// Draws every row independently from a symmetric Dirichlet(alpha) prior.
pub fn sample_lm(spec: &NGramSpec, rng: &mut Rng) -> TransitionTensor {
    let s = spec.alphabet_size;
    let rows = spec.num_histories().expect("validated spec");
    let gamma = Gamma::new(spec.alpha, 1.0).expect("alpha validated positive");
    let mut data = Vec::with_capacity(rows * s);
    let mut draw = vec![0.0; s];
    for _ in 0..rows {
        loop {
            for g in draw.iter_mut() {
                *g = gamma.sample(rng);
            }
            let total: f64 = draw.iter().sum();
            // tiny alpha can underflow every component
            if total > 0.0 && total.is_finite() {
                data.extend(draw.iter().map(|g| g / total));
                break;
            }
        }
    }
    TransitionTensor {
        spec: spec.clone(),
        rows: data,
    }
}

/// First-order chain over `(n-1)`-tuples equivalent to the order-`(n-1)` source.
#[derive(Debug, Clone)]
pub struct LiftedChain {
    alphabet_size: usize,
    history_len: usize,
    num_states: usize,
    // successor probabilities, indexed [state * S + appended token]
    probs: Vec<f64>,
}

impl LiftedChain {
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    /// Target state reached from `state` by appending `token`.
    pub fn successor(&self, state: usize, token: usize) -> usize {
        if self.history_len == 0 {
            0
        } else {
            (state % (self.num_states / self.alphabet_size)) * self.alphabet_size + token
        }
    }

    /// Probability of appending `token` in `state`.
    pub fn prob(&self, state: usize, token: usize) -> f64 {
        if self.history_len == 0 {
            1.0
        } else {
            self.probs[state * self.alphabet_size + token]
        }
    }

    /// Dense `num_states x num_states` transition matrix.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut dense = vec![vec![0.0; self.num_states]; self.num_states];
        for (i, row) in dense.iter_mut().enumerate() {
            if self.history_len == 0 {
                row[0] = 1.0;
                continue;
            }
            for tok in 0..self.alphabet_size {
                row[self.successor(i, tok)] += self.prob(i, tok);
            }
        }
        dense
    }

    /// One step `pi^T T` of the chain.
    pub fn step(&self, pi: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        if self.history_len == 0 {
            out[0] = pi[0];
            return;
        }
        let s = self.alphabet_size;
        for (state, &mass) in pi.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let base = (state % (self.num_states / s)) * s;
            let row = &self.probs[state * s..(state + 1) * s];
            for (tok, &p) in row.iter().enumerate() {
                out[base + tok] += mass * p;
            }
        }
    }
}

pub fn lift(tensor: &TransitionTensor) -> LiftedChain {
    let history_len = tensor.spec.history_len();
    LiftedChain {
        alphabet_size: tensor.alphabet_size(),
        history_len,
        num_states: tensor.num_rows(),
        probs: if history_len == 0 { Vec::new() } else { tensor.rows.clone() },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pub pi: Vec<f64>,
    /// `max |pi^T T - pi^T|` for the returned `pi`.
    pub residual: f64,
    pub iters: usize,
}

/// Power iteration from the uniform vector. Stops once the step residual and
/// the rate-extrapolated distance to the fixed point are both below `tol`.
///
/// Chains that mix too slowly for plain iteration (nearly absorbing states,
/// common at small alpha) are restarted from a row of `P^(2^j)` obtained by
/// repeated squaring, when the chain is small enough to hold densely.
pub fn stationary(chain: &LiftedChain, tol: f64, max_iters: usize) -> Result<StationaryDistribution> {
    if !(tol > 0.0) {
        return Err(invalid("stationary tolerance must be positive"));
    }
    let n = chain.num_states();
    let dense_ok = n <= DENSE_LIMIT;
    let plain = if dense_ok { max_iters.min(SQUARING_AFTER) } else { max_iters };
    let first = power_iterate(chain, vec![1.0 / n as f64; n], tol, plain);
    if first.is_ok() || plain == max_iters {
        return first;
    }
    let mut st = power_iterate(chain, squared_start(chain), tol, max_iters - plain)?;
    st.iters += plain;
    Ok(st)
}

/// Averaged rows of `P^(2^j)`, squaring until the rows agree.
fn squared_start(chain: &LiftedChain) -> Vec<f64> {
    let n = chain.num_states();
    let mut m = chain.to_dense();
    for _ in 0..64 {
        let mut sq = vec![vec![0.0; n]; n];
        for (i, row) in m.iter().enumerate() {
            for (k, &a) in row.iter().enumerate() {
                if a != 0.0 {
                    for (o, &b) in sq[i].iter_mut().zip(&m[k]) {
                        *o += a * b;
                    }
                }
            }
        }
        for row in sq.iter_mut() {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        }
        m = sq;
        let spread = (0..n)
            .map(|j| {
                let (lo, hi) = m.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), r| (lo.min(r[j]), hi.max(r[j])));
                hi - lo
            })
            .fold(0.0, f64::max);
        if spread < 1e-15 {
            break;
        }
    }
    let mut pi: Vec<f64> = (0..n).map(|j| m.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let total: f64 = pi.iter().sum();
    pi.iter_mut().for_each(|x| *x /= total);
    pi
}

fn power_iterate(chain: &LiftedChain, mut pi: Vec<f64>, tol: f64, max_iters: usize) -> Result<StationaryDistribution> {
    let n = pi.len();
    let mut next = vec![0.0; n];
    let mut residual = f64::INFINITY;
    // recent residuals; their max is an envelope that survives oscillating (complex-eigenvalue) decay
    let mut recent: Vec<f64> = Vec::with_capacity(RATE_WINDOW + ENVELOPE);
    let (mut best, mut stalled) = (f64::INFINITY, 0usize);
    for iter in 0..max_iters {
        chain.step(&pi, &mut next);
        residual = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let total: f64 = next.iter().sum();
        for (p, x) in pi.iter_mut().zip(&next) {
            *p = x / total;
        }
        if recent.len() == RATE_WINDOW + ENVELOPE {
            recent.remove(0);
        }
        recent.push(residual);
        let env = |window: &[f64]| window.iter().copied().fold(0.0, f64::max);
        let now = env(&recent[recent.len().saturating_sub(ENVELOPE)..]);
        if now < best {
            (best, stalled) = (now, 0);
        } else {
            stalled += 1;
        }
        if now > tol {
            continue;
        }
        // the stepped vector is about env * rate / (1 - rate) from the fixed point
        let err = if recent.len() == RATE_WINDOW + ENVELOPE {
            let then = env(&recent[..ENVELOPE]);
            let rate = if then > 0.0 { (now / then).powf(1.0 / RATE_WINDOW as f64).min(1.0 - 1e-9) } else { 0.0 };
            if now == 0.0 { 0.0 } else { now * rate / (1.0 - rate) }
        } else {
            f64::INFINITY
        };
        // at the rounding floor the envelope stops shrinking and the rate estimate is meaningless
        if err <= tol || now <= 1e-3 * tol || stalled >= STALL_STEPS || residual == 0.0 {
            chain.step(&pi, &mut next);
            let last = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if last <= tol {
                return Ok(StationaryDistribution { pi, residual: last, iters: iter + 1 });
            }
        }
    }
    Err(Error::NonConvergence {
        residual,
        iters: max_iters,
    })
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_categorical(probs: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the cumulative sum; take the last supported index
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// Samples `len` tokens: the first `n-1` jointly from `pi`, the rest from the
/// tensor row of their `(n-1)`-history.
pub fn sample_sequence(
    tensor: &TransitionTensor,
    pi: &StationaryDistribution,
    len: usize,
    rng: &mut Rng,
) -> Result<Vec<usize>> {
    let h = tensor.spec.history_len();
    let s = tensor.alphabet_size();
    if len < h {
        return Err(invalid(format!("sequence length {len} shorter than history length {h}")));
    }
    let mut seq = Vec::with_capacity(len);
    if h > 0 {
        let state = sample_categorical(&pi.pi, rng);
        seq.extend(decode_history(state, h, s));
    }
    while seq.len() < len {
        let row = tensor.row(history_index(&seq[seq.len() - h..], s));
        seq.push(sample_categorical(row, rng));
    }
    Ok(seq)
}

/// Next-token distribution given only the last `history.len() <= n-1`
/// tokens, marginalising the unobserved prefix under `pi`.
pub fn conditional(
    tensor: &TransitionTensor,
    pi: &StationaryDistribution,
    history: &[usize],
) -> Result<Vec<f64>> {
    let full = tensor.spec.history_len();
    let s = tensor.alphabet_size();
    let l = history.len();
    if l > full {
        return Err(invalid(format!("history of length {l} exceeds n-1 = {full}")));
    }
    if l == full {
        return Ok(tensor.row(history_index(history, s)).to_vec());
    }
    let modulus = s.pow(l as u32);
    let target = history_index(history, s);
    let mut out = vec![0.0; s];
    let mut mass = 0.0;
    for (state, &w) in pi.pi.iter().enumerate() {
        if state % modulus != target {
            continue;
        }
        mass += w;
        for (o, &p) in out.iter_mut().zip(tensor.row(state)) {
            *o += w * p;
        }
    }
    if mass < 1e-300 {
        return Err(Error::DegenerateHistory(mass));
    }
    out.iter_mut().for_each(|o| *o /= mass);
    Ok(out)
}

/// Cross-entropy `-sum truth[s] log max(pred[s], 1e-12)` in nats.
pub fn ce_loss_vs_truth(predicted: &[f64], truth: &[f64]) -> f64 {
    predicted
        .iter()
        .zip(truth)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&p, &t)| -t * p.max(PROB_FLOOR).ln())
        .sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// A sampled source together with its stationary distribution.
#[derive(Debug, Clone)]
pub struct LanguageModel {
    pub tensor: TransitionTensor,
    pub stationary: StationaryDistribution,
}

impl LanguageModel {
    pub fn sample(spec: &NGramSpec, rng: &mut Rng) -> Result<Self> {
        let tensor = sample_lm(spec, rng);
        Self::from_tensor(tensor)
    }

    pub fn from_tensor(tensor: TransitionTensor) -> Result<Self> {
        let stationary = stationary(
            &lift(&tensor),
            DEFAULT_STATIONARY_TOL,
            DEFAULT_STATIONARY_MAX_ITERS,
        )?;
        Ok(LanguageModel { tensor, stationary })
    }

    pub fn sample_sequence(&self, len: usize, rng: &mut Rng) -> Result<Vec<usize>> {
        sample_sequence(&self.tensor, &self.stationary, len, rng)
    }

    pub fn conditional(&self, history: &[usize]) -> Result<Vec<f64>> {
        conditional(&self.tensor, &self.stationary, history)
    }
}

/// Draws `count` independent (source, sequence) pairs. Item `i` uses the
/// sub-streams `(seed, tag, i)`, so batches are reproducible item by item.
pub fn sample_tasks(
    spec: &NGramSpec,
    len: usize,
    count: usize,
    seed: u64,
    tag: &str,
) -> Result<(Vec<LanguageModel>, SequenceBatch)> {
    use rayon::prelude::*;
    let items: Vec<(LanguageModel, Vec<usize>)> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = crate::rng::stream(seed, tag, i as u64);
            let lm = LanguageModel::sample(spec, &mut rng)?;
            let seq = lm.sample_sequence(len, &mut rng)?;
            Ok((lm, seq))
        })
        .collect::<Result<_>>()?;
    let (lms, sequences): (Vec<_>, Vec<_>) = items.into_iter().unzip();
    Ok((
        lms,
        SequenceBatch {
            lm_index: (0..count).collect(),
            sequences,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceBatch {
    pub sequences: Vec<Vec<usize>>,
    /// Index of the generating source for each sequence.
    pub lm_index: Vec<usize>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// CSV with header `lm_index,t0,t1,...`, one sequence per row.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let width = self.sequences.iter().map(Vec::len).max().unwrap_or(0);
        let mut header = vec!["lm_index".to_string()];
        header.extend((0..width).map(|t| format!("t{t}")));
        out.write_record(&header)?;
        for (seq, lm) in self.sequences.iter().zip(&self.lm_index) {
            let mut rec = vec![lm.to_string()];
            rec.extend(seq.iter().map(usize::to_string));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
        let mut batch = SequenceBatch {
            sequences: Vec::new(),
            lm_index: Vec::new(),
        };
        for rec in rdr.records() {
            let rec = rec?;
            let mut fields = rec.iter().map(|f| {
                f.parse::<usize>()
                    .map_err(|e| invalid(format!("bad integer {f:?}: {e}")))
            });
            let lm = fields.next().ok_or_else(|| invalid("empty row"))??;
            batch.lm_index.push(lm);
            batch.sequences.push(fields.collect::<Result<_>>()?);
        }
        Ok(batch)
    }
}
