//! Adam training on freshly sampled tasks, evaluation against a frozen test
//! set, estimator baselines and plateau detection.

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{kgram_predict, kgram_predict_smoothed};
use crate::grad::{batch_loss_grad, loss_grad_positions, pairwise_sum, tree_reduce, GradientSet};
use crate::rng::stream;
use crate::seqmodel::{ce_loss_vs_truth, entropy, LanguageModel, NGramSpec};
use crate::transformer::{forward_with, masked_softmax, ModelConfig, ModelParams, ParamGroup, Predictor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum LossMode {
    FinalPosition,
    /// Mean loss over prefixes of length `start_t..=T`.
    AveragedPositions { start_t: usize },
}

/// Per-group standard deviations of the Gaussian initialisation; zero gives
/// an all-zero group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSpec {
    pub a1: f64,
    pub v1: f64,
    pub k2: f64,
    pub q2: f64,
}

impl InitSpec {
    pub fn zeros() -> Self {
        InitSpec { a1: 0.0, v1: 0.0, k2: 0.0, q2: 0.0 }
    }

    pub fn sigma(&self, g: ParamGroup) -> f64 {
        match g {
            ParamGroup::A1 => self.a1,
            ParamGroup::V1 => self.v1,
            ParamGroup::K2 => self.k2,
            ParamGroup::Q2 => self.q2,
        }
    }
}

impl Default for InitSpec {
    /// Zero attention logits and keys (so iteration 0 is exactly the unigram
    /// estimator), small Gaussian values and queries.
    fn default() -> Self {
        InitSpec { a1: 0.0, v1: 0.02, k2: 0.0, q2: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauConfig {
    /// Sliding-window length in iterations.
    pub window: usize,
    /// Largest absolute least-squares slope (nats per iteration) of a flat window.
    pub slope_tol: f64,
    /// Largest distance between a plateau's mean loss and the baseline it is labelled with.
    pub match_tol: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        PlateauConfig { window: 256, slope_tol: 1e-5, match_tol: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: NGramSpec,
    /// Training and test sequence length.
    #[serde(rename = "T")]
    pub seq_len: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub iters: usize,
    pub eval_every: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
    #[serde(default)]
    pub snapshot_iters: Vec<usize>,
    pub test_set_size: usize,
    pub init: InitSpec,
    pub plateau: PlateauConfig,
    /// Pseudo-count of the smoothed estimators used as plateau baselines;
    /// `None` uses the task's Dirichlet alpha, `Some(0.0)` the raw counting
    /// estimators with backoff.
    #[serde(default)]
    pub baseline_pseudo: Option<f64>,
}

impl TrainConfig {
    /// S = 5, n = 3, T = 32, alpha = 0.5, two heads, Adam at lr 0.01 with batch
    /// 128 for 2^14 iterations, 2^16 test sequences.
    pub fn paper(seed: u64) -> Self {
        let t = 32;
        TrainConfig {
            model: ModelConfig::new(5, 2, t).expect("valid"),
            task: NGramSpec::new(5, 3, 0.5, seed).expect("valid"),
            seq_len: t,
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            batch_size: 128,
            iters: 1 << 14,
            eval_every: 64,
            loss_mode: LossMode::FinalPosition,
            seed,
            snapshot_iters: vec![0, 1 << 10, 1 << 11, 1 << 12, 1 << 13, 1 << 14],
            test_set_size: 1 << 16,
            init: InitSpec::default(),
            plateau: PlateauConfig::default(),
            baseline_pseudo: None,
        }
    }

    pub fn baseline_pseudo(&self) -> f64 {
        self.baseline_pseudo.unwrap_or(self.task.alpha)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if self.model.alphabet_size != self.task.alphabet_size {
            return Err(invalid("model and task alphabet sizes differ"));
        }
        if self.seq_len < self.task.n.max(2) || self.seq_len > self.model.t_max {
            return Err(invalid(format!(
                "T = {} must lie in [max(n, 2), t_max = {}]",
                self.seq_len, self.model.t_max
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr must be positive"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("eps must be positive and weight decay non-negative"));
        }
        if self.batch_size == 0 || self.eval_every == 0 || self.test_set_size == 0 {
            return Err(invalid("batch size, eval interval and test set size must be positive"));
        }
        if let LossMode::AveragedPositions { start_t } = self.loss_mode {
            if start_t < self.task.n || start_t > self.seq_len {
                return Err(invalid(format!("start_t = {start_t} must lie in [n, T]")));
            }
        }
        for g in ParamGroup::ALL {
            let s = self.init.sigma(g);
            if !(s >= 0.0 && s.is_finite()) {
                return Err(invalid("init sigmas must be finite and non-negative"));
            }
        }
        if !(self.baseline_pseudo() >= 0.0 && self.baseline_pseudo().is_finite()) {
            return Err(invalid("baseline pseudo-count must be finite and non-negative"));
        }
        let p = &self.plateau;
        if p.window == 0 || !(p.slope_tol >= 0.0) || !(p.match_tol >= 0.0) {
            return Err(invalid("invalid plateau settings"));
        }
        Ok(())
    }
}

/// Optimiser state, one moment pair per parameter coordinate in
/// [`ModelParams::slices_mut`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        AdamState { m: vec![0.0; num_params], v: vec![0.0; num_params], t: 0 }
    }

    pub fn for_params(params: &ModelParams) -> Self {
        Self::new(params.slices().iter().map(|s| s.len()).sum())
    }
}

/// Adam over flat coordinate slices. Weight decay multiplies the parameters
/// by `1 - lr * weight_decay` before the moment update.
pub fn adam_update(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, cfg: &AdamConfig) {
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;
    let mut idx = 0;
    for (p, g) in params.iter_mut().zip(grads) {
        for (x, &gi) in p.iter_mut().zip(g.iter()) {
            let m = &mut state.m[idx];
            let v = &mut state.v[idx];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gi;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            if cfg.weight_decay != 0.0 {
                *x *= decay;
            }
            *x -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            idx += 1;
        }
    }
}

pub fn adam_step(params: &mut ModelParams, grads: &GradientSet, state: &mut AdamState, cfg: &AdamConfig) {
    let g = grads.slices();
    let mut p = params.slices_mut();
    adam_update(&mut p, &g, state, cfg);
}

/// Frozen evaluation set: sequences and the true next-token distribution of
/// each one's source.
#[derive(Debug, Clone)]
pub struct TestSet {
    pub sequences: Vec<Vec<usize>>,
    pub truths: Vec<Vec<f64>>,
}

impl TestSet {
    pub fn sample(task: &NGramSpec, len: usize, count: usize, seed: u64) -> Result<Self> {
        let items: Vec<(Vec<usize>, Vec<f64>)> = (0..count)
            .into_par_iter()
            .map(|i| {
                let mut rng = stream(seed, "test", i as u64);
                let lm = LanguageModel::sample(task, &mut rng)?;
                let seq = lm.sample_sequence(len, &mut rng)?;
                let truth = lm.tensor.next_token_probs(&seq).to_vec();
                Ok((seq, truth))
            })
            .collect::<Result<_>>()?;
        let (sequences, truths) = items.into_iter().unzip();
        Ok(TestSet { sequences, truths })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Mean cross-entropy of the model at the final position.
    pub fn model_ce(&self, params: &ModelParams) -> Result<f64> {
        let base = Predictor::new(params, self.sequences[0].len())?;
        let losses: Vec<f64> = self
            .sequences
            .par_iter()
            .zip(self.truths.par_iter())
            .map_init(
                || (base.clone(), vec![0.0; params.config.alphabet_size]),
                |(pred, out), (seq, truth)| {
                    pred.predict_into(seq, out)?;
                    Ok(ce_loss_vs_truth(out, truth))
                },
            )
            .collect::<Result<_>>()?;
        Ok(pairwise_sum(&losses) / losses.len() as f64)
    }

    /// Mean cross-entropy of the k-gram estimator (with backoff).
    pub fn kgram_ce(&self, k: usize, alphabet_size: usize) -> Result<f64> {
        let losses: Vec<f64> = self
            .sequences
            .par_iter()
            .zip(self.truths.par_iter())
            .map(|(seq, truth)| Ok(ce_loss_vs_truth(&kgram_predict(seq, k, alphabet_size, true)?, truth)))
            .collect::<Result<_>>()?;
        Ok(pairwise_sum(&losses) / losses.len() as f64)
    }

    /// Mean cross-entropy of the add-`pseudo` smoothed k-gram estimator;
    /// `pseudo = 0` falls back to [`TestSet::kgram_ce`].
    pub fn kgram_ce_smoothed(&self, k: usize, alphabet_size: usize, pseudo: f64) -> Result<f64> {
        if pseudo == 0.0 {
            return self.kgram_ce(k, alphabet_size);
        }
        let losses: Vec<f64> = self
            .sequences
            .par_iter()
            .zip(self.truths.par_iter())
            .map(|(seq, truth)| Ok(ce_loss_vs_truth(&kgram_predict_smoothed(seq, k, alphabet_size, pseudo)?, truth)))
            .collect::<Result<_>>()?;
        Ok(pairwise_sum(&losses) / losses.len() as f64)
    }

    /// Baselines `(k, CE)` for `k = 1..=n` at the configured smoothing.
    pub fn baselines(&self, cfg: &TrainConfig) -> Result<Vec<(usize, f64)>> {
        (1..=cfg.task.n)
            .map(|k| Ok((k, self.kgram_ce_smoothed(k, cfg.model.alphabet_size, cfg.baseline_pseudo())?)))
            .collect()
    }

    /// Mean entropy of the true next-token distributions, a lower bound for
    /// any model's cross-entropy.
    pub fn mean_entropy(&self) -> f64 {
        let h: Vec<f64> = self.truths.iter().map(|t| entropy(t)).collect();
        pairwise_sum(&h) / h.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iter: usize,
    pub train_ce: f64,
    pub test_ce: f64,
    pub grad_norm_total: f64,
    /// `[A1, V1, K2, Q2]`.
    pub grad_norm_groups: [f64; 4],
    pub plateau_label: Option<usize>,
    /// `lag_mass[h][l]`: mean first-layer attention of head `h` on lag `l`.
    pub lag_mass: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iter: usize,
    /// `T x T` first-layer attention per head.
    pub a1: Vec<Array2<f64>>,
    /// Second-layer attention on the first test sequence.
    pub a2: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start_iter: usize,
    pub end_iter: usize,
    pub mean_loss: f64,
    pub label: Option<usize>,
}

impl Segment {
    pub fn duration(&self) -> usize {
        self.end_iter - self.start_iter
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
    /// `(k, CE)` of the k-gram estimators on the test set.
    pub baselines: Vec<(usize, f64)>,
    pub test_entropy: f64,
    pub plateaus: Vec<Segment>,
    pub snapshots: Vec<Snapshot>,
}

impl MetricsLog {
    pub fn baseline(&self, k: usize) -> Option<f64> {
        self.baselines.iter().find(|b| b.0 == k).map(|b| b.1)
    }

    /// One row per evaluation; column order is
    /// `iter, train_ce, test_ce, grad_norm_total, grad_norm_{a1,v1,k2,q2},
    /// baseline_k{1..}, plateau_label, h{h}_lag{l}...`.
    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = ["iter", "train_ce", "test_ce", "grad_norm_total"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend(ParamGroup::ALL.iter().map(|g| format!("grad_norm_{}", g.name().to_lowercase())));
        header.extend(self.baselines.iter().map(|(k, _)| format!("baseline_k{k}")));
        header.push("plateau_label".into());
        if let Some(row) = self.rows.first() {
            for (h, lags) in row.lag_mass.iter().enumerate() {
                header.extend((0..lags.len()).map(|l| format!("h{h}_lag{l}")));
            }
        }
        wr.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.iter.to_string(),
                row.train_ce.to_string(),
                row.test_ce.to_string(),
                row.grad_norm_total.to_string(),
            ];
            rec.extend(row.grad_norm_groups.iter().map(|x| x.to_string()));
            rec.extend(self.baselines.iter().map(|(_, b)| b.to_string()));
            rec.push(row.plateau_label.map(|k| k.to_string()).unwrap_or_default());
            rec.extend(row.lag_mass.iter().flatten().map(|x| x.to_string()));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn write_plateaus_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["start_iter", "end_iter", "mean_loss", "label"])?;
        for s in &self.plateaus {
            wr.write_record([
                s.start_iter.to_string(),
                s.end_iter.to_string(),
                s.mean_loss.to_string(),
                s.label.map(|k| k.to_string()).unwrap_or_default(),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    pub params: ModelParams,
}

/// Mean attention of each head on lags `0..=max_lag`, over rows where the
/// lag exists.
pub fn lag_profile(probs: &[Array2<f64>], max_lag: usize) -> Vec<Vec<f64>> {
    probs
        .iter()
        .map(|p| {
            let t = p.nrows();
            (0..=max_lag)
                .map(|l| {
                    if l >= t {
                        return 0.0;
                    }
                    let total: f64 = (l..t).map(|i| p[[i, i - l]]).sum();
                    total / (t - l) as f64
                })
                .collect()
        })
        .collect()
}

fn attention_maps(params: &ModelParams, len: usize) -> Vec<Array2<f64>> {
    params
        .a1
        .iter()
        .map(|a| masked_softmax(a.slice(ndarray::s![..len, ..len])))
        .collect()
}

fn init_params(cfg: &TrainConfig) -> ModelParams {
    let mut rng = stream(cfg.seed, "init", 0);
    ModelParams::gaussian(&cfg.model, |g| cfg.init.sigma(g), &mut rng)
}

/// Gradient of the training loss on the batch drawn for iteration `it`.
fn train_batch_grad(cfg: &TrainConfig, params: &ModelParams, it: usize) -> Result<GradientSet> {
    let b = cfg.batch_size;
    let items: Vec<(Vec<usize>, LanguageModel)> = (0..b)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(cfg.seed, "train", (it * b + i) as u64);
            let lm = LanguageModel::sample(&cfg.task, &mut rng)?;
            let seq = lm.sample_sequence(cfg.seq_len, &mut rng)?;
            Ok((seq, lm))
        })
        .collect::<Result<_>>()?;
    match cfg.loss_mode {
        LossMode::FinalPosition => {
            let seqs: Vec<Vec<usize>> = items.iter().map(|(s, _)| s.clone()).collect();
            let truths: Vec<&[f64]> = items.iter().map(|(s, lm)| lm.tensor.next_token_probs(s)).collect();
            batch_loss_grad(params, &seqs, &truths)
        }
        LossMode::AveragedPositions { start_t } => {
            let leaf = |i: usize| {
                let (seq, lm) = &items[i];
                let targets: Vec<(usize, &[f64])> = (start_t..=seq.len())
                    .map(|l| (l, lm.tensor.next_token_probs(&seq[..l])))
                    .collect();
                loss_grad_positions(params, seq, &targets)
            };
            let mut g = tree_reduce(items.len(), &leaf).expect("nonempty batch")?;
            g.scale(1.0 / b as f64);
            Ok(g)
        }
    }
}

/// Trains from the configured initialisation. Iteration `i` evaluates and
/// logs the parameters before its update; the final row is at `iters`.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let test = TestSet::sample(&cfg.task, cfg.seq_len, cfg.test_set_size, cfg.seed)?;
    let baselines = test.baselines(cfg)?;
    train_with_test_set(cfg, &test, baselines)
}

pub fn train_with_test_set(cfg: &TrainConfig, test: &TestSet, baselines: Vec<(usize, f64)>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut params = init_params(cfg);
    let mut adam = AdamState::for_params(&params);
    let acfg = AdamConfig {
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: cfg.eps,
        weight_decay: cfg.weight_decay,
    };
    let mut rows = Vec::new();
    let mut snapshots = Vec::new();
    for it in 0..=cfg.iters {
        let grad = train_batch_grad(cfg, &params, it)?;
        if !grad.is_finite() {
            return Err(Error::NumericalDivergence { iter: it });
        }
        if it % cfg.eval_every == 0 || it == cfg.iters {
            let test_ce = test.model_ce(&params)?;
            if !test_ce.is_finite() {
                return Err(Error::NumericalDivergence { iter: it });
            }
            let maps = attention_maps(&params, cfg.seq_len);
            rows.push(MetricsRow {
                iter: it,
                train_ce: grad.loss,
                test_ce,
                grad_norm_total: grad.norm(),
                grad_norm_groups: grad.group_norms(),
                plateau_label: None,
                lag_mass: lag_profile(&maps, cfg.task.n),
            });
        }
        if cfg.snapshot_iters.contains(&it) {
            let first = params.first_layer(cfg.seq_len)?;
            let trace = forward_with(&params, &first, &test.sequences[0])?;
            snapshots.push(Snapshot {
                iter: it,
                a1: attention_maps(&params, cfg.seq_len),
                a2: trace.a2.to_vec(),
            });
        }
        if it < cfg.iters {
            adam_step(&mut params, &grad, &mut adam, &acfg);
            if !params.is_finite() {
                return Err(Error::NumericalDivergence { iter: it + 1 });
            }
        }
    }
    let iters: Vec<usize> = rows.iter().map(|r| r.iter).collect();
    let losses: Vec<f64> = rows.iter().map(|r| r.test_ce).collect();
    let plateaus = detect_plateaus(&iters, &losses, &baselines, &cfg.plateau);
    for seg in &plateaus {
        for row in rows.iter_mut() {
            if row.iter >= seg.start_iter && row.iter <= seg.end_iter {
                row.plateau_label = seg.label;
            }
        }
    }
    Ok(TrainOutcome {
        log: MetricsLog {
            rows,
            baselines,
            test_entropy: test.mean_entropy(),
            plateaus,
            snapshots,
        },
        params,
    })
}

fn ls_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        0.0
    } else {
        sxy / sxx
    }
}

/// Flat stretches of a loss curve sampled at `iters`.
///
/// The window starting at each sample spans the following `cfg.window`
/// iterations (at least three samples); windows stop at the first one that
/// reaches the end of the series. A segment is a maximal run of
/// consecutive window starts whose least-squares slope is within
/// `slope_tol`; it covers the union of those windows and is labelled with
/// the closest baseline within `match_tol` of its mean loss.
pub fn detect_plateaus(iters: &[usize], losses: &[f64], baselines: &[(usize, f64)], cfg: &PlateauConfig) -> Vec<Segment> {
    let n = iters.len().min(losses.len());
    let mut windows = Vec::new();
    for i in 0..n {
        let mut j = i;
        while j + 1 < n && iters[j + 1] - iters[i] <= cfg.window {
            j += 1;
        }
        if j < i + 2 {
            break;
        }
        let xs: Vec<f64> = iters[i..=j].iter().map(|&x| x as f64).collect();
        let flat = ls_slope(&xs, &losses[i..=j]).abs() <= cfg.slope_tol;
        windows.push((i, j, flat));
        if j == n - 1 {
            break;
        }
    }
    let mut out = Vec::new();
    let mut k = 0;
    while k < windows.len() {
        if !windows[k].2 {
            k += 1;
            continue;
        }
        let start = windows[k].0;
        let mut end = windows[k].1;
        while k + 1 < windows.len() && windows[k + 1].2 {
            k += 1;
            end = end.max(windows[k].1);
        }
        k += 1;
        let mean = losses[start..=end].iter().sum::<f64>() / (end - start + 1) as f64;
        let label = baselines
            .iter()
            .filter(|(_, b)| (mean - b).abs() <= cfg.match_tol)
            .min_by(|a, b| (mean - a.1).abs().total_cmp(&(mean - b.1).abs()))
            .map(|b| b.0);
        out.push(Segment { start_iter: iters[start], end_iter: iters[end], mean_loss: mean, label });
    }
    out
}

/// Median of a slice (mean of the middle pair for even length); `None` if empty.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median gradient norm over evaluations inside detected plateaus and over
/// the remaining evaluations.
pub fn grad_norm_medians(log: &MetricsLog) -> (Option<f64>, Option<f64>) {
    let inside = |it: usize| log.plateaus.iter().any(|s| it >= s.start_iter && it <= s.end_iter);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for r in &log.rows {
        if inside(r.iter) {
            a.push(r.grad_norm_total);
        } else {
            b.push(r.grad_norm_total);
        }
    }
    (median(&a), median(&b))
}

/// Whether a run shows a bigram-level plateau of at least `min_len`
/// iterations that ends before the test loss first comes within `tol` of
/// the n-gram baseline.
pub fn has_bigram_stage(log: &MetricsLog, n: usize, min_len: usize, tol: f64) -> bool {
    let Some(top) = log.baseline(n) else { return false };
    let Some(bigram) = log.baseline(2) else { return false };
    let reached = log.rows.iter().find(|r| r.test_ce <= top + tol).map(|r| r.iter);
    let Some(reached) = reached else { return false };
    log.plateaus.iter().any(|s| {
        (s.mean_loss - bigram).abs() <= tol && s.duration() >= min_len && s.end_iter <= reached
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub plateau_labels: Vec<Option<usize>>,
    /// Iteration at the middle of the second plateau, if one was detected.
    pub second_plateau_iter: Option<usize>,
    /// Per head, the lag carrying the most attention at that iteration.
    pub head_lags: Vec<usize>,
    pub lag_mass: Vec<Vec<f64>>,
    pub final_test_ce: f64,
}

/// Trains one run per seed (the seed drives tasks, test set and init) and
/// summarises plateau order and the attention pattern at the second plateau.
pub fn seed_sweep(cfg: &TrainConfig, seeds: &[u64]) -> Result<Vec<SeedSummary>> {
    if seeds.len() < 2 {
        return Err(Error::InsufficientSeeds(seeds.len()));
    }
    seeds
        .iter()
        .map(|&seed| {
            let mut c = cfg.clone();
            c.seed = seed;
            c.task.seed = seed;
            let out = train(&c)?;
            Ok(summarise(seed, &out.log))
        })
        .collect()
}

pub fn summarise(seed: u64, log: &MetricsLog) -> SeedSummary {
    let second = log.plateaus.get(1).map(|s| (s.start_iter + s.end_iter) / 2);
    let row = second.and_then(|mid| log.rows.iter().min_by_key(|r| r.iter.abs_diff(mid)));
    let lag_mass = row.map(|r| r.lag_mass.clone()).unwrap_or_default();
    let head_lags = lag_mass
        .iter()
        .map(|m| m.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map(|x| x.0).unwrap_or(0))
        .collect();
    SeedSummary {
        seed,
        plateau_labels: log.plateaus.iter().map(|s| s.label).collect(),
        second_plateau_iter: second,
        head_lags,
        lag_mass,
        final_test_ce: log.rows.last().map(|r| r.test_ce).unwrap_or(f64::NAN),
    }
}
