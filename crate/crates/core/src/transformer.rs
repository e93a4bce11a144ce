//! Simplified disentangled two-layer attention-only transformer.
//!
//! * Layer 0: tokens are mapped to an orthonormal family `s_0..s_{S-1}` in
//!   `R^d` (one-hot by default).
//! * Layer 1: `m` heads whose attention pattern is a learned `T_max x T_max`
//!   logit matrix (masked softmax of its leading `T x T` block), each followed
//!   by a `d x d` value matrix. Head outputs are concatenated after the skip
//!   block, giving rows of width `D1 = (m+1) d`.
//! * Layer 2: one head that scores keys by `<K2 r1[i], Q2 r1[t]>` and averages
//!   the layer-0 embeddings; the fixed unembedding turns that average into a
//!   distribution over tokens, `p = sum_i a2[i] e_{x_i}`.

use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(rename = "S")]
    pub alphabet_size: usize,
    /// Embedding dimension; `d >= S`.
    pub d: usize,
    /// Number of first-layer heads.
    pub heads: usize,
    pub t_max: usize,
    /// `None` embeds token `j` as the basis vector `e_j` of `R^d`; `Some(seed)`
    /// draws a random orthonormal family instead.
    #[serde(default)]
    pub embedding_seed: Option<u64>,
}

impl ModelConfig {
    pub fn new(alphabet_size: usize, heads: usize, t_max: usize) -> Result<Self> {
        let cfg = ModelConfig {
            alphabet_size,
            d: alphabet_size,
            heads,
            t_max,
            embedding_seed: None,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphabet_size < 2 {
            return Err(invalid("alphabet size must be >= 2"));
        }
        if self.d < self.alphabet_size {
            return Err(invalid(format!("d = {} is smaller than S = {}", self.d, self.alphabet_size)));
        }
        if self.heads < 1 {
            return Err(invalid("need at least one first-layer head"));
        }
        if self.t_max < 2 {
            return Err(invalid("t_max must be >= 2"));
        }
        Ok(())
    }

    /// Width of a first-layer output row.
    pub fn d1(&self) -> usize {
        (self.heads + 1) * self.d
    }

    /// `S x d` matrix whose rows are the token embeddings.
    pub fn embedding_matrix(&self) -> Array2<f64> {
        let (s, d) = (self.alphabet_size, self.d);
        match self.embedding_seed {
            None => Array2::from_shape_fn((s, d), |(i, j)| if i == j { 1.0 } else { 0.0 }),
            Some(seed) => {
                let mut rng = crate::rng::stream(seed, "embedding", 0);
                let mut e = Array2::<f64>::zeros((s, d));
                for i in 0..s {
                    // modified Gram-Schmidt on Gaussian draws
                    let mut v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                    for j in 0..i {
                        let proj = v.dot(&e.row(j));
                        v.scaled_add(-proj, &e.row(j));
                    }
                    let norm = v.dot(&v).sqrt();
                    e.row_mut(i).assign(&(v / norm));
                }
                e
            }
        }
    }
}

/// Trainable parameters plus the fixed embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Fixed `S x d` embedding (not trained).
    pub embedding: Array2<f64>,
    /// First-layer attention logits, one `T_max x T_max` matrix per head.
    pub a1: Vec<Array2<f64>>,
    /// First-layer value matrices, `d x d`.
    pub v1: Vec<Array2<f64>>,
    /// Second-layer key, `D1 x D1`.
    pub k2: Array2<f64>,
    /// Second-layer query, `D1 x D1`.
    pub q2: Array2<f64>,
    /// Set by constructions that only work for one sequence length.
    #[serde(default)]
    pub fixed_len: Option<usize>,
}

/// Parameter groups, in the order used for norms and flattening.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    A1,
    V1,
    K2,
    Q2,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::A1, ParamGroup::V1, ParamGroup::K2, ParamGroup::Q2];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::A1 => "A1",
            ParamGroup::V1 => "V1",
            ParamGroup::K2 => "K2",
            ParamGroup::Q2 => "Q2",
        }
    }
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, d1, t) = (config.d, config.d1(), config.t_max);
        ModelParams {
            config: config.clone(),
            embedding: config.embedding_matrix(),
            a1: vec![Array2::zeros((t, t)); config.heads],
            v1: vec![Array2::zeros((d, d)); config.heads],
            k2: Array2::zeros((d1, d1)),
            q2: Array2::zeros((d1, d1)),
            fixed_len: None,
        }
    }

    /// Independent Gaussian entries with a per-group standard deviation
    /// (zero sigma leaves the group at zero).
    pub fn gaussian(config: &ModelConfig, sigma: impl Fn(ParamGroup) -> f64, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(config);
        for group in ParamGroup::ALL {
            let sd = sigma(group);
            if sd == 0.0 {
                continue;
            }
            for slice in p.group_slices_mut(group) {
                for x in slice.iter_mut() {
                    let z: f64 = StandardNormal.sample(rng);
                    *x = sd * z;
                }
            }
        }
        p
    }

    pub fn group_slices(&self, group: ParamGroup) -> Vec<&[f64]> {
        match group {
            ParamGroup::A1 => self.a1.iter().map(|a| a.as_slice().unwrap()).collect(),
            ParamGroup::V1 => self.v1.iter().map(|a| a.as_slice().unwrap()).collect(),
            ParamGroup::K2 => vec![self.k2.as_slice().unwrap()],
            ParamGroup::Q2 => vec![self.q2.as_slice().unwrap()],
        }
    }

    pub fn group_slices_mut(&mut self, group: ParamGroup) -> Vec<&mut [f64]> {
        match group {
            ParamGroup::A1 => self.a1.iter_mut().map(|a| a.as_slice_mut().unwrap()).collect(),
            ParamGroup::V1 => self.v1.iter_mut().map(|a| a.as_slice_mut().unwrap()).collect(),
            ParamGroup::K2 => vec![self.k2.as_slice_mut().unwrap()],
            ParamGroup::Q2 => vec![self.q2.as_slice_mut().unwrap()],
        }
    }

    /// All trainable coordinates in group order.
    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.a1.iter_mut().map(|a| a.as_slice_mut().unwrap()));
        out.extend(self.v1.iter_mut().map(|a| a.as_slice_mut().unwrap()));
        out.push(self.k2.as_slice_mut().unwrap());
        out.push(self.q2.as_slice_mut().unwrap());
        out
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        ParamGroup::ALL.iter().flat_map(|&g| self.group_slices(g)).collect()
    }

    pub fn group_norm(&self, group: ParamGroup) -> f64 {
        self.group_slices(group)
            .iter()
            .flat_map(|s| s.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// Shape and finiteness checks against the stored config.
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let (d, d1, t) = (c.d, c.d1(), c.t_max);
        let ok = self.embedding.dim() == (c.alphabet_size, d)
            && self.a1.len() == c.heads
            && self.v1.len() == c.heads
            && self.a1.iter().all(|a| a.dim() == (t, t))
            && self.v1.iter().all(|v| v.dim() == (d, d))
            && self.k2.dim() == (d1, d1)
            && self.q2.dim() == (d1, d1);
        if !ok {
            return Err(invalid("parameter shapes do not match the model config"));
        }
        if !self.is_finite() {
            return Err(invalid("parameters contain non-finite entries"));
        }
        Ok(())
    }

    /// Sequence-independent part of the forward pass for length `len`.
    pub fn first_layer(&self, len: usize) -> Result<Arc<FirstLayer>> {
        if len == 0 {
            return Err(invalid("empty sequence"));
        }
        if len > self.config.t_max {
            return Err(invalid(format!("sequence length {len} exceeds t_max {}", self.config.t_max)));
        }
        if let Some(expected) = self.fixed_len {
            if expected != len {
                return Err(Error::LengthMismatch { expected, got: len });
            }
        }
        let probs = self
            .a1
            .iter()
            .map(|a| masked_softmax(a.slice(s![..len, ..len])))
            .collect();
        // columns of V1 E^T are the value-projected embeddings of each token
        let values = self.v1.iter().map(|v| v.dot(&self.embedding.t())).collect();
        Ok(Arc::new(FirstLayer { len, probs, values }))
    }
}

/// Attention patterns and value-projected embeddings of the first layer.
#[derive(Debug, Clone)]
pub struct FirstLayer {
    pub len: usize,
    /// Row-stochastic causal `len x len` attention per head.
    pub probs: Vec<Array2<f64>>,
    /// `d x S` matrices `V1[h] E^T`.
    pub values: Vec<Array2<f64>>,
}

/// Row embeddings of a sequence.
pub fn embed(embedding: &Array2<f64>, seq: &[usize]) -> Array2<f64> {
    embedding.select(Axis(0), seq)
}

/// Row-wise causal softmax with max subtraction; entries above the diagonal
/// are zero.
pub fn masked_softmax(logits: ArrayView2<f64>) -> Array2<f64> {
    let (rows, cols) = logits.dim();
    let mut out = Array2::zeros((rows, cols));
    for i in 0..rows {
        let width = (i + 1).min(cols);
        let row = logits.row(i);
        let max = row.slice(s![..width]).fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        let mut total = 0.0;
        for j in 0..width {
            let e = (row[j] - max).exp();
            out[[i, j]] = e;
            total += e;
        }
        for j in 0..width {
            out[[i, j]] /= total;
        }
    }
    out
}

fn softmax(z: ArrayView1<f64>) -> Array1<f64> {
    let max = z.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = z.mapv(|x| (x - max).exp());
    let total = e.sum();
    e / total
}

/// Cached activations of one forward pass, query at the last position.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    pub first: Arc<FirstLayer>,
    /// `T x d` layer-0 embeddings.
    pub r0: Array2<f64>,
    /// Per head, `T x S` attention mass each query puts on each token.
    pub token_mass: Vec<Array2<f64>>,
    /// Per head, `T x d` attention-weighted layer-0 embeddings.
    pub rbar: Vec<Array2<f64>>,
    /// `T x D1` concatenated first-layer output (skip block first).
    pub r1: Array2<f64>,
    /// `Q2 r1[t]`.
    pub query: Array1<f64>,
    /// `K2^T Q2 r1[t]`, so that the second-layer logits are `r1 w`.
    pub w: Array1<f64>,
    /// Second-layer logits for the last query.
    pub logits: Array1<f64>,
    /// Second-layer attention for the last query.
    pub a2: Array1<f64>,
    pub p_out: Vec<f64>,
}

impl ForwardTrace {
    pub fn a1(&self) -> &[Array2<f64>] {
        &self.first.probs
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn forward(params: &ModelParams, seq: &[usize]) -> Result<ForwardTrace> {
    let first = params.first_layer(seq.len())?;
    forward_with(params, &first, seq)
}

/// Forward pass reusing a precomputed first layer of matching length.
pub fn forward_with(params: &ModelParams, first: &Arc<FirstLayer>, seq: &[usize]) -> Result<ForwardTrace> {
    let cfg = &params.config;
    let (s_size, d) = (cfg.alphabet_size, cfg.d);
    let t = seq.len();
    if t != first.len {
        return Err(invalid(format!("first layer built for length {}, sequence has {t}", first.len)));
    }
    if let Some(&bad) = seq.iter().find(|&&x| x >= s_size) {
        return Err(invalid(format!("token {bad} outside alphabet of size {s_size}")));
    }
    let r0 = embed(&params.embedding, seq);
    let mut r1 = Array2::zeros((t, cfg.d1()));
    r1.slice_mut(s![.., ..d]).assign(&r0);
    let mut token_mass = Vec::with_capacity(cfg.heads);
    let mut rbar = Vec::with_capacity(cfg.heads);
    for (h, (probs, values)) in first.probs.iter().zip(&first.values).enumerate() {
        let mut mass = Array2::<f64>::zeros((t, s_size));
        for i in 0..t {
            let row = probs.row(i);
            let mut m = mass.row_mut(i);
            for (j, &x) in seq.iter().enumerate().take(i + 1) {
                m[x] += row[j];
            }
        }
        let block = mass.dot(&values.t());
        r1.slice_mut(s![.., (h + 1) * d..(h + 2) * d]).assign(&block);
        rbar.push(mass.dot(&params.embedding));
        token_mass.push(mass);
    }
    let last = r1.row(t - 1);
    let query = params.q2.dot(&last);
    let w = params.k2.t().dot(&query);
    let logits = r1.dot(&w);
    let a2 = softmax(logits.view());
    let mut p_out = vec![0.0; s_size];
    for (&x, &a) in seq.iter().zip(a2.iter()) {
        p_out[x] += a;
    }
    Ok(ForwardTrace {
        tokens: seq.to_vec(),
        first: Arc::clone(first),
        r0,
        token_mass,
        rbar,
        r1,
        query,
        w,
        logits,
        a2,
        p_out,
    })
}

/// Output distribution only.
pub fn predict(params: &ModelParams, seq: &[usize]) -> Result<Vec<f64>> {
    Ok(forward(params, seq)?.p_out)
}

/// Allocation-free output computation for repeated evaluation at fixed
/// parameters and sequence length.
#[derive(Debug, Clone)]
pub struct Predictor {
    len: usize,
    s: usize,
    d: usize,
    d1: usize,
    heads: usize,
    /// Row-major `len x len` attention per head.
    probs: Vec<Vec<f64>>,
    /// Row-major `d x S` value-projected embeddings per head.
    values: Vec<Vec<f64>>,
    embedding: Vec<f64>,
    /// Row-major `K2^T Q2`, so that the logit of key `i` is `r1[i] . G r1[t]`.
    g: Vec<f64>,
    mass: Vec<f64>,
    r1: Vec<f64>,
    gq: Vec<f64>,
    logits: Vec<f64>,
}

impl Predictor {
    pub fn new(params: &ModelParams, len: usize) -> Result<Self> {
        let first = params.first_layer(len)?;
        let cfg = &params.config;
        let g = params.k2.t().dot(&params.q2);
        Ok(Predictor {
            len,
            s: cfg.alphabet_size,
            d: cfg.d,
            d1: cfg.d1(),
            heads: cfg.heads,
            probs: first.probs.iter().map(|p| p.iter().copied().collect()).collect(),
            values: first.values.iter().map(|v| v.iter().copied().collect()).collect(),
            embedding: params.embedding.iter().copied().collect(),
            g: g.iter().copied().collect(),
            mass: vec![0.0; cfg.alphabet_size],
            r1: vec![0.0; len * cfg.d1()],
            gq: vec![0.0; cfg.d1()],
            logits: vec![0.0; len],
        })
    }

    /// Writes the output distribution for `seq` into `out`.
    pub fn predict_into(&mut self, seq: &[usize], out: &mut [f64]) -> Result<()> {
        let (t, s, d, d1) = (self.len, self.s, self.d, self.d1);
        if seq.len() != t {
            return Err(invalid(format!("predictor built for length {t}, sequence has {}", seq.len())));
        }
        if let Some(&bad) = seq.iter().find(|&&x| x >= s) {
            return Err(invalid(format!("token {bad} outside alphabet of size {s}")));
        }
        for (i, &x) in seq.iter().enumerate() {
            let row = &mut self.r1[i * d1..(i + 1) * d1];
            row.fill(0.0);
            row[..d].copy_from_slice(&self.embedding[x * d..(x + 1) * d]);
            for h in 0..self.heads {
                self.mass.fill(0.0);
                let prow = &self.probs[h][i * t..i * t + i + 1];
                for (j, &pj) in prow.iter().enumerate() {
                    self.mass[seq[j]] += pj;
                }
                let block = &mut row[(h + 1) * d..(h + 2) * d];
                let vals = &self.values[h];
                for (r, b) in block.iter_mut().enumerate() {
                    let vr = &vals[r * s..(r + 1) * s];
                    *b = vr.iter().zip(&self.mass).map(|(v, m)| v * m).sum();
                }
            }
        }
        let last = &self.r1[(t - 1) * d1..t * d1];
        for (r, gq) in self.gq.iter_mut().enumerate() {
            *gq = self.g[r * d1..(r + 1) * d1].iter().zip(last).map(|(a, b)| a * b).sum();
        }
        let mut max = f64::NEG_INFINITY;
        for i in 0..t {
            let z: f64 = self.r1[i * d1..(i + 1) * d1].iter().zip(&self.gq).map(|(a, b)| a * b).sum();
            self.logits[i] = z;
            max = max.max(z);
        }
        let mut total = 0.0;
        for z in self.logits.iter_mut() {
            *z = (*z - max).exp();
            total += *z;
        }
        out[..s].fill(0.0);
        for (&x, &e) in seq.iter().zip(&self.logits) {
            out[x] += e / total;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::kgram_predict;
    use crate::rng::stream;

    fn random_params(s: usize, m: usize, t: usize, seed: u64) -> ModelParams {
        let cfg = ModelConfig::new(s, m, t).unwrap();
        ModelParams::gaussian(&cfg, |_| 0.7, &mut stream(seed, "p", 0))
    }

    #[test]
    fn predictor_matches_forward() {
        let cfg = ModelConfig::new(4, 2, 12).unwrap();
        let mut rng = stream(9, "pred", 0);
        let p = ModelParams::gaussian(&cfg, |_| 0.7, &mut rng);
        let mut pred = Predictor::new(&p, 10).unwrap();
        let mut out = vec![0.0; 4];
        for r in 0..20u64 {
            let seq: Vec<usize> = (0..10).map(|i| ((i as u64 * 7 + r * 3 + i as u64 * r) % 4) as usize).collect();
            pred.predict_into(&seq, &mut out).unwrap();
            let want = predict(&p, &seq).unwrap();
            for (a, b) in out.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-13);
            }
        }
        assert!(pred.predict_into(&[0; 9], &mut out).is_err());
    }

    #[test]
    fn one_hot_embedding() {
        let e = ModelConfig::new(3, 1, 4).unwrap().embedding_matrix();
        let r0 = embed(&e, &[0, 2]);
        assert_eq!(r0, ndarray::arr2(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]));
    }

    #[test]
    fn random_orthonormal_embedding() {
        let cfg = ModelConfig {
            alphabet_size: 4,
            d: 7,
            heads: 1,
            t_max: 4,
            embedding_seed: Some(3),
        };
        let e = cfg.embedding_matrix();
        let gram = e.dot(&e.t());
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_softmax_examples() {
        let z = masked_softmax(Array2::zeros((4, 4)).view());
        for i in 0..4 {
            for j in 0..4 {
                let want = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                assert_eq!(z[[i, j]], want);
            }
        }
        let mut l = Array2::zeros((5, 5));
        l[[4, 4]] = 100.0;
        let p = masked_softmax(l.view());
        assert!(p[[4, 4]] >= 1.0 - 4.0 * (-100f64).exp());
    }

    #[test]
    fn zero_params_give_unigram() {
        let cfg = ModelConfig::new(4, 2, 16).unwrap();
        let p = ModelParams::zeros(&cfg);
        for i in 0..50 {
            let seq: Vec<usize> = (0..1 + i % 16).map(|j| (j * 7 + i) % 4).collect();
            let out = predict(&p, &seq).unwrap();
            let uni = kgram_predict(&seq, 1, 4, false).unwrap();
            for (a, b) in out.iter().zip(&uni) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn single_token_returns_its_indicator() {
        let p = random_params(3, 2, 8, 1);
        assert_eq!(predict(&p, &[2]).unwrap(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn trace_invariants() {
        let p = random_params(3, 2, 10, 2);
        let seq = [0, 1, 2, 2, 1, 0, 0, 1];
        let tr = forward(&p, &seq).unwrap();
        for a in tr.a1() {
            for i in 0..seq.len() {
                let row = a.row(i);
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().skip(i + 1).all(|&x| x == 0.0));
            }
        }
        assert!((tr.a2.sum() - 1.0).abs() < 1e-12);
        assert!((tr.p_out.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(tr.r1.slice(s![.., ..3]), tr.r0);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut p = random_params(3, 1, 4, 3);
        assert!(forward(&p, &[]).is_err());
        assert!(forward(&p, &[0, 1, 2, 0, 1]).is_err());
        assert!(forward(&p, &[0, 3]).is_err());
        p.fixed_len = Some(3);
        assert!(matches!(forward(&p, &[0, 1]), Err(Error::LengthMismatch { expected: 3, got: 2 })));
        assert!(forward(&p, &[0, 1, 2]).is_ok());
    }

    #[test]
    fn alphabet_relabeling_is_equivariant() {
        let s = 3;
        let perm = [2usize, 0, 1];
        let pm = Array2::from_shape_fn((s, s), |(i, j)| if i == perm[j] { 1.0 } else { 0.0 });
        for seed in 0..10 {
            let p = random_params(s, 2, 8, 10 + seed);
            let mut q = p.clone();
            for v in q.v1.iter_mut() {
                *v = pm.dot(v).dot(&pm.t());
            }
            let d1 = p.config.d1();
            let mut big = Array2::zeros((d1, d1));
            for b in 0..3 {
                big.slice_mut(s![b * s..(b + 1) * s, b * s..(b + 1) * s]).assign(&pm);
            }
            q.k2 = big.dot(&p.k2).dot(&big.t());
            q.q2 = big.dot(&p.q2).dot(&big.t());
            let seq = [0, 1, 1, 2, 0, 2, 1, 0];
            let relabeled: Vec<usize> = seq.iter().map(|&x| perm[x]).collect();
            let a = predict(&p, &seq).unwrap();
            let b = predict(&q, &relabeled).unwrap();
            for x in 0..s {
                assert!((a[x] - b[perm[x]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn params_json_has_shapes() {
        let p = random_params(2, 1, 3, 4);
        let v = serde_json::to_value(&p).unwrap();
        assert_eq!(v["k2"]["dim"], serde_json::json!([4, 4]));
        let back: ModelParams = serde_json::from_value(v).unwrap();
        assert_eq!(back, p);
    }
}
