//! Closed-form gradients of the two-layer model.
//!
//! Everything flows through the second-layer logits `z_i = <K2 r1[i], Q2 r1[t]>`.
//! For a loss with output sensitivities `g_s = dloss/dp_s`, the softmax gives
//! `dz_i = a2[i] (g_{x_i} - sum_j a2[j] g_{x_j})`, and from there
//!
//! * `dK2 = (Q2 r1[t]) rho^T` and `dQ2 = (K2 rho) r1[t]^T` with `rho = sum_i dz_i r1[i]`,
//! * `dr1[i] = dz_i K2^T Q2 r1[t]`, plus `Q2^T K2 rho` for the query row,
//! * per head, `dV1 = sum_i u[i] rbar[i]^T` where `u` is the head's block of
//!   `dr1` and `rbar[i]` the attention-weighted embedding,
//! * `dA1[i,j] = P[i,j] (u[i].V s_{x_j} - sum_l P[i,l] u[i].V s_{x_l})`.
//!
//! Output Jacobians use the same path with `g = e_s`. The cross-entropy gradient
//! uses `g_s = (p_s - y_s) / p_s`, the residual-times-score form, so a zero
//! residual yields exactly zero gradients.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::Rng;
use crate::seqmodel::{ce_loss_vs_truth, PROB_FLOOR};
use crate::transformer::{forward, forward_with, ForwardTrace, ModelConfig, ModelParams, ParamGroup};

/// Gradient (or Jacobian row) with the same shapes as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub a1: Vec<Array2<f64>>,
    pub v1: Vec<Array2<f64>>,
    pub k2: Array2<f64>,
    pub q2: Array2<f64>,
    pub loss: f64,
}

impl GradientSet {
    pub fn zeros(config: &ModelConfig) -> Self {
        let (d, d1, t) = (config.d, config.d1(), config.t_max);
        GradientSet {
            a1: vec![Array2::zeros((t, t)); config.heads],
            v1: vec![Array2::zeros((d, d)); config.heads],
            k2: Array2::zeros((d1, d1)),
            q2: Array2::zeros((d1, d1)),
            loss: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.a1.iter_mut().zip(&other.a1) {
            *a += b;
        }
        for (a, b) in self.v1.iter_mut().zip(&other.v1) {
            *a += b;
        }
        self.k2 += &other.k2;
        self.q2 += &other.q2;
        self.loss += other.loss;
    }

    pub fn scale(&mut self, factor: f64) {
        for a in self.a1.iter_mut().chain(self.v1.iter_mut()) {
            *a *= factor;
        }
        self.k2 *= factor;
        self.q2 *= factor;
        self.loss *= factor;
    }

    pub fn group_slices(&self, group: ParamGroup) -> Vec<&[f64]> {
        match group {
            ParamGroup::A1 => self.a1.iter().map(|a| a.as_slice().unwrap()).collect(),
            ParamGroup::V1 => self.v1.iter().map(|a| a.as_slice().unwrap()).collect(),
            ParamGroup::K2 => vec![self.k2.as_slice().unwrap()],
            ParamGroup::Q2 => vec![self.q2.as_slice().unwrap()],
        }
    }

    /// All coordinates in the same order as [`ModelParams::slices_mut`].
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

    /// `[A1, V1, K2, Q2]` norms.
    pub fn group_norms(&self) -> [f64; 4] {
        ParamGroup::ALL.map(|g| self.group_norm(g))
    }

    pub fn norm(&self) -> f64 {
        self.group_norms().iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.loss.is_finite() && self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }
}

/// Sum in a fixed binary tree, independent of how the input was produced.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

/// Sum of `leaf(0) + ... + leaf(n - 1)` over a fixed binary tree that halves
/// the index range, evaluated with `rayon::join`. Only `O(depth)` partial sums
/// are alive per thread, and the association order never depends on the
/// scheduler. `None` for `n = 0`.
pub fn tree_reduce<F>(n: usize, leaf: &F) -> Option<Result<GradientSet>>
where
    F: Fn(usize) -> Result<GradientSet> + Sync,
{
    fn go<F: Fn(usize) -> Result<GradientSet> + Sync>(lo: usize, hi: usize, leaf: &F) -> Result<GradientSet> {
        if hi - lo == 1 {
            return leaf(lo);
        }
        let mid = lo + (hi - lo) / 2;
        let (a, b) = rayon::join(|| go(lo, mid, leaf), || go(mid, hi, leaf));
        let mut a = a?;
        a.add_assign(&b?);
        Ok(a)
    }
    (n > 0).then(|| go(0, n, leaf))
}

/// Backpropagates sensitivities of the second-layer logits to all parameters.
fn backprop_logits(params: &ModelParams, trace: &ForwardTrace, dz: &Array1<f64>) -> GradientSet {
    let t = trace.len();
    let mut out = GradientSet::zeros(&params.config);

    let rho = trace.r1.t().dot(dz);
    let k_rho = params.k2.dot(&rho);
    let last = trace.r1.row(t - 1);
    out.k2 = standard(outer(&trace.query, &rho));
    out.q2 = standard(outer(&k_rho, &last.to_owned()));

    // gradient wrt the first-layer output rows
    let mut dr1 = outer(dz, &trace.w);
    let query_back = params.q2.t().dot(&k_rho);
    {
        let mut row = dr1.row_mut(t - 1);
        row += &query_back;
    }
    first_layer_back(params, trace, &dr1, &mut out);
    out
}

/// Adds the first-layer gradients implied by `dr1 = dloss/dr1` to `out`.
fn first_layer_back(params: &ModelParams, trace: &ForwardTrace, dr1: &Array2<f64>, out: &mut GradientSet) {
    let d = params.config.d;
    let t = trace.len();
    for h in 0..params.config.heads {
        let u = dr1.slice(s![.., (h + 1) * d..(h + 2) * d]);
        out.v1[h] = standard(u.t().dot(&trace.rbar[h]));
        // beta[i][s] = u[i] . V1[h] s_s
        let beta = u.dot(&trace.first.values[h]);
        let probs = &trace.first.probs[h];
        let mass = &trace.token_mass[h];
        let da = &mut out.a1[h];
        for i in 0..t {
            let b = beta.row(i);
            let centre: f64 = mass.row(i).iter().zip(b.iter()).map(|(m, x)| m * x).sum();
            for j in 0..=i {
                da[[i, j]] = probs[[i, j]] * (b[trace.tokens[j]] - centre);
            }
        }
    }
}

/// Row-major copy; matrix products of transposed views come back column-major.
pub(crate) fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Jacobians `d p_out[s] / d theta`, one [`GradientSet`] per output token.
pub fn output_jacobians(params: &ModelParams, trace: &ForwardTrace) -> Vec<GradientSet> {
    (0..params.config.alphabet_size)
        .map(|s| {
            let dz: Array1<f64> = trace
                .tokens
                .iter()
                .zip(trace.a2.iter())
                .map(|(&x, &a)| a * (f64::from(u8::from(x == s)) - trace.p_out[s]))
                .collect();
            backprop_logits(params, trace, &dz)
        })
        .collect()
}

/// Output sensitivities of `-sum y log max(p, floor)` in residual form.
fn ce_sensitivities(p: &[f64], truth: &[f64]) -> Vec<f64> {
    p.iter()
        .zip(truth)
        .map(|(&pi, &yi)| if pi >= PROB_FLOOR { (pi - yi) / pi } else { 1.0 })
        .collect()
}

/// Gradient of the cross-entropy against `truth` from an existing trace.
pub fn loss_grad_from_trace(params: &ModelParams, trace: &ForwardTrace, truth: &[f64]) -> GradientSet {
    let g = ce_sensitivities(&trace.p_out, truth);
    let gx: Vec<f64> = trace.tokens.iter().map(|&x| g[x]).collect();
    let mean: f64 = gx.iter().zip(trace.a2.iter()).map(|(g, a)| g * a).sum();
    let dz: Array1<f64> = gx.iter().zip(trace.a2.iter()).map(|(g, a)| a * (g - mean)).collect();
    let mut out = backprop_logits(params, trace, &dz);
    out.loss = ce_loss_vs_truth(&trace.p_out, truth);
    out
}

/// Cross-entropy loss and its gradient for predicting the token after `seq`.
pub fn loss_grad(params: &ModelParams, seq: &[usize], truth: &[f64]) -> Result<GradientSet> {
    check_truth(truth, params.config.alphabet_size)?;
    let trace = forward(params, seq)?;
    Ok(loss_grad_from_trace(params, &trace, truth))
}

fn check_truth(truth: &[f64], s: usize) -> Result<()> {
    if truth.len() != s {
        return Err(invalid(format!("truth has length {}, expected {s}", truth.len())));
    }
    if truth.iter().any(|&x| x < 0.0) || (truth.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid("truth is not a probability vector"));
    }
    Ok(())
}

/// Loss averaged over several query positions of one sequence, in a single
/// pass: `targets[j] = (prefix length, truth)` asks for the prediction after
/// `seq[..len]`. Causal attention makes every prefix's first layer the
/// leading block of the full one, so one trace serves all queries.
pub fn loss_grad_positions(params: &ModelParams, seq: &[usize], targets: &[(usize, &[f64])]) -> Result<GradientSet> {
    if targets.is_empty() {
        return Err(invalid("no target positions"));
    }
    for (len, truth) in targets {
        check_truth(truth, params.config.alphabet_size)?;
        if *len == 0 || *len > seq.len() {
            return Err(invalid(format!("prefix length {len} out of range")));
        }
    }
    let trace = forward(params, seq)?;
    Ok(loss_grad_positions_from_trace(params, &trace, targets))
}

pub fn loss_grad_positions_from_trace(params: &ModelParams, trace: &ForwardTrace, targets: &[(usize, &[f64])]) -> GradientSet {
    let t = trace.len();
    let d1 = params.config.d1();
    let s_size = params.config.alphabet_size;
    let mut out = GradientSet::zeros(&params.config);
    // keys[i] = K2 r1[i]
    let keys = trace.r1.dot(&params.k2.t());
    let mut dkeys = Array2::<f64>::zeros((t, d1));
    let mut dr1 = Array2::<f64>::zeros((t, d1));
    let mut dq2 = Array2::<f64>::zeros((d1, d1));
    let mut losses = Vec::with_capacity(targets.len());
    for &(len, truth) in targets {
        let q_idx = len - 1;
        let r_q = trace.r1.row(q_idx);
        let query = params.q2.dot(&r_q);
        let logits = keys.slice(s![..len, ..]).dot(&query);
        let max = logits.fold(f64::NEG_INFINITY, |m, &z| m.max(z));
        let e = logits.mapv(|z| (z - max).exp());
        let a = &e / e.sum();
        let mut p = vec![0.0; s_size];
        for (&x, &ai) in trace.tokens[..len].iter().zip(a.iter()) {
            p[x] += ai;
        }
        losses.push(ce_loss_vs_truth(&p, truth));
        let g = ce_sensitivities(&p, truth);
        let mean: f64 = trace.tokens[..len].iter().zip(a.iter()).map(|(&x, ai)| g[x] * ai).sum();
        let dz: Array1<f64> = trace.tokens[..len].iter().zip(a.iter()).map(|(&x, ai)| ai * (g[x] - mean)).collect();
        // dloss/dkeys[i] = dz_i query, dloss/dquery = sum_i dz_i keys[i]
        dkeys.slice_mut(s![..len, ..]).zip_mut_with(&outer(&dz, &query), |acc, v| *acc += v);
        let dquery = keys.slice(s![..len, ..]).t().dot(&dz);
        dq2 += &outer(&dquery, &r_q.to_owned());
        let back = params.q2.t().dot(&dquery);
        let mut row = dr1.row_mut(q_idx);
        row += &back;
    }
    out.k2 = standard(dkeys.t().dot(&trace.r1));
    out.q2 = dq2;
    dr1 += &dkeys.dot(&params.k2);
    first_layer_back(params, trace, &dr1, &mut out);
    out.loss = pairwise_sum(&losses);
    out.scale(1.0 / targets.len() as f64);
    out
}

/// Sequences per sequential accumulation chunk in batch gradients. Chunk sums
/// are combined by [`tree_reduce`], so the result does not depend on the
/// thread count.
pub const BATCH_CHUNK: usize = 8;

/// Mean loss and gradient over a batch of `(sequence, truth)` pairs.
pub fn batch_loss_grad(params: &ModelParams, seqs: &[Vec<usize>], truths: &[&[f64]]) -> Result<GradientSet> {
    if seqs.is_empty() || seqs.len() != truths.len() {
        return Err(invalid("batch must be nonempty with one truth per sequence"));
    }
    let shared = if seqs.iter().all(|s| s.len() == seqs[0].len()) {
        Some(params.first_layer(seqs[0].len())?)
    } else {
        None
    };
    let n_chunks = seqs.len().div_ceil(BATCH_CHUNK);
    let leaf = |c: usize| -> Result<GradientSet> {
        let range = c * BATCH_CHUNK..((c + 1) * BATCH_CHUNK).min(seqs.len());
        let mut acc = GradientSet::zeros(&params.config);
        for (seq, truth) in seqs[range.clone()].iter().zip(&truths[range]) {
            check_truth(truth, params.config.alphabet_size)?;
            let trace = match &shared {
                Some(first) => forward_with(params, first, seq)?,
                None => forward(params, seq)?,
            };
            acc.add_assign(&loss_grad_from_trace(params, &trace, truth));
        }
        Ok(acc)
    };
    let mut total = tree_reduce(n_chunks, &leaf).expect("nonempty batch")?;
    total.scale(1.0 / seqs.len() as f64);
    Ok(total)
}

/// Jacobians of one masked self-attention output row.
#[derive(Debug, Clone)]
pub struct SelfAttentionJacobians {
    /// `[out, r, c]` = d q_t+[out] / d V[r, c]
    pub dv: Array3<f64>,
    pub dk: Array3<f64>,
    pub dq: Array3<f64>,
    /// `dx[i][out, c]` = d q_t+[out] / d q_i[c], for `i <= t`.
    pub dx: Vec<Array2<f64>>,
}

/// Output row `t` of masked self-attention `sum_i p_i V q_i`, with
/// `p = softmax_i <K q_i, Q q_t>` over `i <= t`.
pub fn self_attention_output(
    x: ArrayView2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    t: usize,
) -> Array1<f64> {
    let (p, _) = self_attention_scores(x, q, k, t);
    let mean = weighted_mean(x, &p);
    v.dot(&mean)
}

fn self_attention_scores(
    x: ArrayView2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    t: usize,
) -> (Array1<f64>, Array1<f64>) {
    let qt = q.dot(&x.row(t));
    let logits: Array1<f64> = (0..=t).map(|i| k.dot(&x.row(i)).dot(&qt)).collect();
    let max = logits.fold(f64::NEG_INFINITY, |m, &z| m.max(z));
    let e = logits.mapv(|z| (z - max).exp());
    let total = e.sum();
    (e / total, qt)
}

fn weighted_mean(x: ArrayView2<f64>, p: &Array1<f64>) -> Array1<f64> {
    x.slice(s![..p.len(), ..]).t().dot(p)
}

/// Closed-form Jacobians of a self-attention output row with respect to the
/// value, key and query matrices and to every input row up to `t`.
pub fn self_attention_jacobians(
    x: ArrayView2<f64>,
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    t: usize,
) -> SelfAttentionJacobians {
    let d = x.ncols();
    let (p, qt) = self_attention_scores(x, q, k, t);
    let xbar = weighted_mean(x, &p);
    let kt_q_xt = k.t().dot(&qt);
    let vx: Vec<Array1<f64>> = (0..=t).map(|j| v.dot(&x.row(j))).collect();
    let centred: Vec<Array1<f64>> = (0..=t).map(|j| &x.row(j) - &xbar).collect();

    let mut dv = Array3::zeros((d, d, d));
    for o in 0..d {
        for c in 0..d {
            dv[[o, o, c]] = xbar[c];
        }
    }

    let mut dk = Array3::zeros((d, d, d));
    let mut dq = Array3::zeros((d, d, d));
    for j in 0..=t {
        let k_centred = k.dot(&centred[j]);
        for o in 0..d {
            let w = p[j] * vx[j][o];
            if w == 0.0 {
                continue;
            }
            for r in 0..d {
                for c in 0..d {
                    dk[[o, r, c]] += w * qt[r] * centred[j][c];
                    dq[[o, r, c]] += w * k_centred[r] * x[[t, c]];
                }
            }
        }
    }

    let mut dx = Vec::with_capacity(t + 1);
    for i in 0..=t {
        let mut jac = v.to_owned() * p[i];
        let vc = v.dot(&centred[i]) * p[i];
        jac += &outer(&vc, &kt_q_xt);
        if i == t {
            let qk = q.t().dot(&k);
            for j in 0..=t {
                let right = qk.dot(&centred[j]);
                jac += &(outer(&vx[j], &right) * p[j]);
            }
        }
        dx.push(jac);
    }
    SelfAttentionJacobians { dv, dk, dq, dx }
}

/// Location of one trainable coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coordinate {
    pub group: ParamGroup,
    /// Head index for A1/V1, 0 otherwise.
    pub head: usize,
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst: Option<Coordinate>,
    pub analytic_at_worst: f64,
    pub fd_at_worst: f64,
    pub coordinates_checked: usize,
    pub step: f64,
}

/// Coordinates checked exhaustively below this count; above it, a random
/// subset of this size is drawn.
pub const FD_MAX_COORDS: usize = 4096;

pub(crate) fn all_coordinates(cfg: &ModelConfig) -> Vec<Coordinate> {
    let mut out = Vec::new();
    let mut push = |group, heads: usize, rows: usize, cols: usize| {
        for head in 0..heads {
            for row in 0..rows {
                for col in 0..cols {
                    out.push(Coordinate { group, head, row, col });
                }
            }
        }
    };
    push(ParamGroup::A1, cfg.heads, cfg.t_max, cfg.t_max);
    push(ParamGroup::V1, cfg.heads, cfg.d, cfg.d);
    push(ParamGroup::K2, 1, cfg.d1(), cfg.d1());
    push(ParamGroup::Q2, 1, cfg.d1(), cfg.d1());
    out
}

fn coord_mut(p: &mut ModelParams, c: Coordinate) -> &mut f64 {
    match c.group {
        ParamGroup::A1 => &mut p.a1[c.head][[c.row, c.col]],
        ParamGroup::V1 => &mut p.v1[c.head][[c.row, c.col]],
        ParamGroup::K2 => &mut p.k2[[c.row, c.col]],
        ParamGroup::Q2 => &mut p.q2[[c.row, c.col]],
    }
}

pub(crate) fn coord_value(g: &GradientSet, c: Coordinate) -> f64 {
    match c.group {
        ParamGroup::A1 => g.a1[c.head][[c.row, c.col]],
        ParamGroup::V1 => g.v1[c.head][[c.row, c.col]],
        ParamGroup::K2 => g.k2[[c.row, c.col]],
        ParamGroup::Q2 => g.q2[[c.row, c.col]],
    }
}

/// Relative error with the denominator floored at `1e-8`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Central finite differences of the cross-entropy compared with
/// [`loss_grad`] on every coordinate, or on a random subset of
/// [`FD_MAX_COORDS`] coordinates for large models.
pub fn fd_check(params: &ModelParams, seq: &[usize], truth: &[f64], step: f64, rng: &mut Rng) -> Result<FdReport> {
    if !(step > 0.0) {
        return Err(invalid("finite-difference step must be positive"));
    }
    let analytic = loss_grad(params, seq, truth)?;
    let mut coords = all_coordinates(&params.config);
    if coords.len() > FD_MAX_COORDS {
        let picked = sample(rng, coords.len(), FD_MAX_COORDS).into_vec();
        let mut picked_sorted = picked;
        picked_sorted.sort_unstable();
        coords = picked_sorted.into_iter().map(|i| coords[i]).collect();
    }
    let loss_at = |p: &ModelParams| -> Result<f64> {
        Ok(ce_loss_vs_truth(&forward(p, seq)?.p_out, truth))
    };
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        fd_at_worst: 0.0,
        coordinates_checked: coords.len(),
        step,
    };
    let mut work = params.clone();
    for c in coords {
        let orig = *coord_mut(&mut work, c);
        *coord_mut(&mut work, c) = orig + step;
        let up = loss_at(&work)?;
        *coord_mut(&mut work, c) = orig - step;
        let down = loss_at(&work)?;
        *coord_mut(&mut work, c) = orig;
        let fd = (up - down) / (2.0 * step);
        let an = coord_value(&analytic, c);
        let err = rel_err(an, fd);
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some(c);
            report.analytic_at_worst = an;
            report.fd_at_worst = fd;
        }
    }
    Ok(report)
}
