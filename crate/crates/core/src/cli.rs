//! Batch command-line driver.
//!
//! Every command resolves its configuration from defaults, an optional JSON
//! file (`--config`, partial objects allowed) and flags, in that order of
//! increasing precedence; the resolved configuration is validated before any
//! work starts and written to `<out>/manifest.json`.
//!
//! CSV schemas (all files have a header row):
//!
//! * `sequences.csv`: `lm_index,t0,t1,...`
//! * `baselines.csv`: `k,raw_ce,smoothed_ce,pseudo,entropy`
//! * `stationarity.csv`: the fields of [`ProbeRow`]
//! * `metrics.csv`: see [`MetricsLog::write_csv`]
//! * `plateaus.csv`: `start_iter,end_iter,mean_loss,label`
//! * `snapshots/a1_iter{i}_head{h}.csv`: `c0,...,c{T-1}`, one attention row per query
//! * `snapshots/a2_iter{i}.csv`: `position,weight`

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::Rng as _;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::constructions::{
    stationarity_probe, verify_corpus, BoundConstants, ConstructionVariant, ProbeConfig, ProbeRow, StationarityReport,
};
use crate::error::{invalid, Error, Result};
use crate::grad::fd_check;
use crate::plot::{heatmap_svg, LineChart, Series};
use crate::rng::stream;
use crate::seqmodel::{sample_tasks, NGramSpec, TransitionTensor};
use crate::training::{summarise, train, LossMode, MetricsLog, TestSet, TrainConfig};
use crate::transformer::{ModelConfig, ModelParams};

#[derive(Debug, Parser)]
#[command(name = "subgram", version, about = "In-context n-gram learning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample n-gram sources and one sequence from each.
    Gen(GenArgs),
    /// Cross-entropy of the k-gram estimators on a frozen test set.
    Baselines(BaselinesArgs),
    /// Finite-difference check of the analytic gradients.
    Gradcheck(GradcheckArgs),
    /// Check the k-gram construction against the estimator and the attention bounds.
    Verify(VerifyArgs),
    /// Gradient norms at a construction over a (c, T) grid.
    Probe(ProbeArgs),
    /// Train the model and emit metrics, snapshots and figures.
    Train(TrainArgs),
    /// Train one run per seed and summarise the plateaus.
    Sweep(SweepArgs),
    /// Re-render an SVG from an existing CSV.
    Render(RenderArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct TaskFlags {
    #[arg(long = "S")]
    pub alphabet_size: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long = "T")]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub task: TaskFlags,
    #[arg(long)]
    pub batch: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BaselinesArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub task: TaskFlags,
    /// Number of test sequences.
    #[arg(long)]
    pub count: Option<usize>,
    /// Pseudo-count of the smoothed estimators (default: alpha).
    #[arg(long)]
    pub pseudo: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "S")]
    pub alphabet_size: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long = "T")]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of random (parameters, sequence) pairs.
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub step: Option<f64>,
    /// Exit with status 1 if the largest relative error exceeds this.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Standard deviation of the random parameters.
    #[arg(long)]
    pub sigma: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "S")]
    pub alphabet_size: Option<usize>,
    #[arg(long = "T")]
    pub seq_len: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub c: Option<f64>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Largest accepted `|p_out - estimator|` entry.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long = "S")]
    pub alphabet_size: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Order of the k-gram construction.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub cs: Option<Vec<f64>>,
    #[arg(long = "Ts", value_delimiter = ',')]
    pub ts: Option<Vec<usize>>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossModeFlag {
    Final,
    Averaged,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[command(flatten)]
    pub task: TaskFlags,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long, value_enum)]
    pub loss_mode: Option<LossModeFlag>,
    /// First prefix length of the averaged loss.
    #[arg(long)]
    pub start_t: Option<usize>,
    #[arg(long)]
    pub baseline_pseudo: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub snapshots: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Skip the SVG figures.
    #[arg(long)]
    pub no_figures: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ChartKind {
    Line,
    Heatmap,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    /// Input CSV with a header row.
    #[arg(long)]
    pub input: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value = "line")]
    pub kind: ChartKind,
    /// Column used as x for line charts.
    #[arg(long, default_value = "iter")]
    pub x: String,
    /// Columns drawn as solid lines (default: every column except x).
    #[arg(long, value_delimiter = ',')]
    pub y: Vec<String>,
    /// Columns drawn as dashed lines.
    #[arg(long, value_delimiter = ',')]
    pub dashed: Vec<String>,
    #[arg(long)]
    pub log_y: bool,
    #[arg(long, default_value = "")]
    pub title: String,
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Caps the global rayon pool at `SUBGRAM_THREADS` if set.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("SUBGRAM_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| invalid(format!("SUBGRAM_THREADS must be a positive integer, got {raw:?}")))?;
    // a pool may already exist when called twice in one process (tests)
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Baselines(a) => cmd_baselines(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Verify(a) => cmd_verify(&a),
        Command::Probe(a) => cmd_probe(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Sweep(a) => cmd_sweep(&a),
        Command::Render(a) => cmd_render(&a),
    }
}

/// Recursively overwrites `base` with the fields present in `patch`.
pub fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `default` overlaid with the JSON file at `path`, if any.
pub fn load_config<C: Serialize + DeserializeOwned>(default: &C, path: Option<&Path>) -> Result<C> {
    let mut value = serde_json::to_value(default)?;
    if let Some(path) = path {
        let text = fs::read_to_string(path)?;
        let patch: Value = serde_json::from_str(&text)?;
        if !patch.is_object() {
            return Err(invalid(format!("{} must hold a JSON object", path.display())));
        }
        merge_json(&mut value, patch);
    }
    Ok(serde_json::from_value(value)?)
}

/// Hex SHA-256 of the git-style blob header plus the version string.
pub fn version_hash() -> String {
    let version = format!("subgram {}", env!("CARGO_PKG_VERSION"));
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", version.len()).as_bytes());
    h.update(version.as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize)]
struct Manifest<'a, C: Serialize> {
    command: &'a str,
    version: &'a str,
    version_hash: String,
    config: &'a C,
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_manifest<C: Serialize>(dir: &Path, command: &str, config: &C) -> Result<()> {
    let m = Manifest { command, version: env!("CARGO_PKG_VERSION"), version_hash: version_hash(), config };
    write_json(&dir.join("manifest.json"), &m)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(invalid(format!("{name} must be positive")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub task: NGramSpec,
    #[serde(rename = "T")]
    pub seq_len: usize,
    pub batch: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig { task: NGramSpec { alphabet_size: 5, n: 3, alpha: 0.5, seed: 0 }, seq_len: 32, batch: 128 }
    }
}

fn apply_task(task: &mut NGramSpec, seq_len: &mut usize, f: &TaskFlags) {
    if let Some(s) = f.alphabet_size {
        task.alphabet_size = s;
    }
    if let Some(n) = f.n {
        task.n = n;
    }
    if let Some(a) = f.alpha {
        task.alpha = a;
    }
    if let Some(t) = f.seq_len {
        *seq_len = t;
    }
    if let Some(s) = f.seed {
        task.seed = s;
    }
}

pub fn resolve_gen(a: &GenArgs) -> Result<GenConfig> {
    let mut cfg = load_config(&GenConfig::default(), a.common.config.as_deref())?;
    apply_task(&mut cfg.task, &mut cfg.seq_len, &a.task);
    if let Some(b) = a.batch {
        cfg.batch = b;
    }
    cfg.task.validate()?;
    positive("T", cfg.seq_len)?;
    positive("batch", cfg.batch)?;
    Ok(cfg)
}

/// Writes `lms.json` (one transition tensor per source) and `sequences.csv`.
fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = resolve_gen(a)?;
    let out = &a.common.out;
    prepare_out(out)?;
    let (lms, batch) = sample_tasks(&cfg.task, cfg.seq_len, cfg.batch, cfg.task.seed, "gen")?;
    let tensors: Vec<&TransitionTensor> = lms.iter().map(|lm| &lm.tensor).collect();
    write_json(&out.join("lms.json"), &tensors)?;
    batch.write_csv(fs::File::create(out.join("sequences.csv"))?)?;
    write_manifest(out, "gen", &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselinesConfig {
    pub task: NGramSpec,
    #[serde(rename = "T")]
    pub seq_len: usize,
    pub count: usize,
    /// `None` uses the task's alpha.
    pub pseudo: Option<f64>,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        BaselinesConfig { task: GenConfig::default().task, seq_len: 32, count: 4096, pseudo: None }
    }
}

pub fn resolve_baselines(a: &BaselinesArgs) -> Result<BaselinesConfig> {
    let mut cfg = load_config(&BaselinesConfig::default(), a.common.config.as_deref())?;
    apply_task(&mut cfg.task, &mut cfg.seq_len, &a.task);
    if let Some(c) = a.count {
        cfg.count = c;
    }
    if a.pseudo.is_some() {
        cfg.pseudo = a.pseudo;
    }
    cfg.task.validate()?;
    positive("count", cfg.count)?;
    if cfg.seq_len < cfg.task.n.max(2) {
        return Err(invalid("T must be at least max(n, 2)"));
    }
    let p = cfg.pseudo.unwrap_or(cfg.task.alpha);
    if !(p >= 0.0 && p.is_finite()) {
        return Err(invalid("pseudo-count must be finite and non-negative"));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub k: usize,
    pub raw_ce: f64,
    pub smoothed_ce: f64,
    pub pseudo: f64,
    pub entropy: f64,
}

pub fn baseline_table(cfg: &BaselinesConfig) -> Result<Vec<BaselineRow>> {
    let test = TestSet::sample(&cfg.task, cfg.seq_len, cfg.count, cfg.task.seed)?;
    let pseudo = cfg.pseudo.unwrap_or(cfg.task.alpha);
    let s = cfg.task.alphabet_size;
    let entropy = test.mean_entropy();
    (1..=cfg.task.n)
        .map(|k| {
            Ok(BaselineRow {
                k,
                raw_ce: test.kgram_ce(k, s)?,
                smoothed_ce: test.kgram_ce_smoothed(k, s, pseudo)?,
                pseudo,
                entropy,
            })
        })
        .collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_baselines(a: &BaselinesArgs) -> Result<()> {
    let cfg = resolve_baselines(a)?;
    let out = &a.common.out;
    prepare_out(out)?;
    let rows = baseline_table(&cfg)?;
    write_rows(&out.join("baselines.csv"), &rows)?;
    write_manifest(out, "baselines", &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckConfig {
    #[serde(rename = "S")]
    pub alphabet_size: usize,
    pub heads: usize,
    #[serde(rename = "T")]
    pub seq_len: usize,
    pub seed: u64,
    pub count: usize,
    pub step: f64,
    pub threshold: f64,
    pub sigma: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            alphabet_size: 3,
            heads: 2,
            seq_len: 8,
            seed: 0,
            count: 10,
            step: 1e-4,
            threshold: 1e-5,
            sigma: 0.5,
        }
    }
}

pub fn resolve_gradcheck(a: &GradcheckArgs) -> Result<GradcheckConfig> {
    let mut cfg = load_config(&GradcheckConfig::default(), a.common.config.as_deref())?;
    macro_rules! set {
        ($($f:ident <- $g:ident),*) => { $(if let Some(v) = a.$g { cfg.$f = v; })* };
    }
    set!(alphabet_size <- alphabet_size, heads <- heads, seq_len <- seq_len, seed <- seed, count <- count,
         step <- step, threshold <- threshold, sigma <- sigma);
    ModelConfig::new(cfg.alphabet_size, cfg.heads, cfg.seq_len)?;
    positive("count", cfg.count)?;
    if !(cfg.step > 0.0) || !(cfg.threshold >= 0.0) || !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        return Err(invalid("step must be positive, threshold and sigma non-negative"));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub max_rel_err: f64,
    pub threshold: f64,
    pub pass: bool,
    pub reports: Vec<crate::grad::FdReport>,
}

/// Case `i` draws parameters, a uniform sequence and a random truth from
/// the stream `(seed, "gradcheck", i)`.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckSummary> {
    let mcfg = ModelConfig::new(cfg.alphabet_size, cfg.heads, cfg.seq_len)?;
    let reports = (0..cfg.count)
        .map(|i| {
            let mut rng = stream(cfg.seed, "gradcheck", i as u64);
            let params = ModelParams::gaussian(&mcfg, |_| cfg.sigma, &mut rng);
            let seq: Vec<usize> = (0..cfg.seq_len).map(|_| rng.random_range(0..cfg.alphabet_size)).collect();
            let raw: Vec<f64> = (0..cfg.alphabet_size).map(|_| rng.random_range(0.05..1.0)).collect();
            let z: f64 = raw.iter().sum();
            let truth: Vec<f64> = raw.iter().map(|x| x / z).collect();
            fd_check(&params, &seq, &truth, cfg.step, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckSummary { max_rel_err, threshold: cfg.threshold, pass: max_rel_err <= cfg.threshold, reports })
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let cfg = resolve_gradcheck(a)?;
    let out = &a.common.out;
    prepare_out(out)?;
    let summary = gradcheck(&cfg)?;
    write_json(&out.join("gradcheck.json"), &summary)?;
    write_manifest(out, "gradcheck", &cfg)?;
    println!("{}", serde_json::to_string(&summary)?);
    if !summary.pass {
        return Err(Error::CheckFailed(format!(
            "max relative error {:e} exceeds {:e}",
            summary.max_rel_err, summary.threshold
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyConfig {
    #[serde(rename = "S")]
    pub alphabet_size: usize,
    #[serde(rename = "T")]
    pub seq_len: usize,
    pub k: usize,
    pub c: f64,
    pub count: usize,
    pub seed: u64,
    pub tol: f64,
    pub bounds: BoundConstants,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            alphabet_size: 3,
            seq_len: 16,
            k: 2,
            c: 50.0,
            count: 1000,
            seed: 0,
            tol: 1e-8,
            bounds: BoundConstants::default(),
        }
    }
}

pub fn resolve_verify(a: &VerifyArgs) -> Result<VerifyConfig> {
    let mut cfg = load_config(&VerifyConfig::default(), a.common.config.as_deref())?;
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = a.$f { cfg.$f = v; })* };
    }
    set!(alphabet_size, seq_len, k, c, count, seed, tol);
    let mcfg = ModelConfig::new(cfg.alphabet_size, cfg.k.saturating_sub(1).max(1), cfg.seq_len)?;
    crate::constructions::ConstructionSpec { variant: ConstructionVariant::Kgram { k: cfg.k }, c: cfg.c, config: mcfg }
        .validate()?;
    positive("count", cfg.count)?;
    Ok(cfg)
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    let cfg = resolve_verify(a)?;
    let out = &a.common.out;
    prepare_out(out)?;
    let mcfg = ModelConfig::new(cfg.alphabet_size, cfg.k.saturating_sub(1).max(1), cfg.seq_len)?;
    let report = verify_corpus(&mcfg, cfg.k, cfg.c, cfg.seq_len, cfg.count, cfg.seed, cfg.bounds)?;
    write_json(&out.join("verify.json"), &report)?;
    write_manifest(out, "verify", &cfg)?;
    println!("{}", serde_json::to_string(&report)?);
    if report.violation_count > 0 || report.max_estimator_diff > cfg.tol {
        return Err(Error::CheckFailed(format!(
            "{} bound violations, estimator difference {:e}",
            report.violation_count, report.max_estimator_diff
        )));
    }
    Ok(())
}

fn default_probe() -> ProbeConfig {
    ProbeConfig {
        task: NGramSpec { alphabet_size: 3, n: 3, alpha: 0.5, seed: 0 },
        heads: 1,
        variant: ConstructionVariant::Kgram { k: 2 },
        cs: vec![6.0, 8.0, 10.0, 12.0, 14.0],
        ts: vec![64],
        batch_size: 512,
        seed: 0,
    }
}

pub fn resolve_probe(a: &ProbeArgs) -> Result<ProbeConfig> {
    let mut cfg = load_config(&default_probe(), a.common.config.as_deref())?;
    if let Some(s) = a.alphabet_size {
        cfg.task.alphabet_size = s;
    }
    if let Some(n) = a.n {
        cfg.task.n = n;
    }
    if let Some(al) = a.alpha {
        cfg.task.alpha = al;
    }
    if let Some(h) = a.heads {
        cfg.heads = h;
    }
    if let Some(k) = a.k {
        cfg.variant = ConstructionVariant::Kgram { k };
    }
    if let Some(cs) = &a.cs {
        cfg.cs = cs.clone();
    }
    if let Some(ts) = &a.ts {
        cfg.ts = ts.clone();
    }
    if let Some(b) = a.batch {
        cfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
        cfg.task.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Log-scaled gradient norm against `c`, one line per `T`.
pub fn probe_chart(report: &StationarityReport) -> LineChart {
    let mut by_t: BTreeMap<usize, Vec<&ProbeRow>> = BTreeMap::new();
    for r in &report.rows {
        by_t.entry(r.t).or_default().push(r);
    }
    LineChart {
        title: "gradient norm at the construction".into(),
        x_label: "c".into(),
        y_label: "grad norm".into(),
        log_y: true,
        series: by_t
            .into_iter()
            .map(|(t, rows)| Series::solid(format!("T = {t}"), rows.iter().map(|r| (r.c, r.grad_norm_total)).collect()))
            .collect(),
    }
}

fn cmd_probe(a: &ProbeArgs) -> Result<()> {
    let cfg = resolve_probe(a)?;
    let out = &a.common.out;
    prepare_out(out)?;
    let report = stationarity_probe(&cfg)?;
    report.write_csv(fs::File::create(out.join("stationarity.csv"))?)?;
    fs::write(out.join("stationarity.svg"), probe_chart(&report).to_svg())?;
    write_manifest(out, "probe", &cfg)
}

pub fn resolve_train(common: &Common, f: &TrainFlags) -> Result<TrainConfig> {
    let seed = f.task.seed.unwrap_or(0);
    let mut cfg = load_config(&TrainConfig::paper(seed), common.config.as_deref())?;
    let old_s = cfg.task.alphabet_size;
    apply_task(&mut cfg.task, &mut cfg.seq_len, &f.task);
    if let Some(s) = f.task.seed {
        cfg.seed = s;
    }
    if f.task.alphabet_size.is_some() {
        cfg.model.alphabet_size = cfg.task.alphabet_size;
        if cfg.model.d == old_s {
            cfg.model.d = cfg.task.alphabet_size;
        }
    }
    if f.task.seq_len.is_some() {
        cfg.model.t_max = cfg.seq_len;
    }
    if let Some(h) = f.heads {
        cfg.model.heads = h;
    }
    macro_rules! set {
        ($($f:ident <- $g:ident),*) => { $(if let Some(v) = f.$g { cfg.$f = v; })* };
    }
    set!(lr <- lr, batch_size <- batch, iters <- iters, eval_every <- eval_every, test_set_size <- test_size,
         weight_decay <- weight_decay);
    let start_t = f.start_t.unwrap_or(match cfg.loss_mode {
        LossMode::AveragedPositions { start_t } => start_t,
        LossMode::FinalPosition => cfg.task.n,
    });
    match f.loss_mode {
        Some(LossModeFlag::Final) => cfg.loss_mode = LossMode::FinalPosition,
        Some(LossModeFlag::Averaged) => cfg.loss_mode = LossMode::AveragedPositions { start_t },
        None => {
            if let LossMode::AveragedPositions { .. } = cfg.loss_mode {
                cfg.loss_mode = LossMode::AveragedPositions { start_t };
            }
        }
    }
    if f.baseline_pseudo.is_some() {
        cfg.baseline_pseudo = f.baseline_pseudo;
    }
    if let Some(s) = &f.snapshots {
        cfg.snapshot_iters = s.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_matrix_csv(path: &Path, rows: impl Iterator<Item = Vec<f64>>, width: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record((0..width).map(|j| format!("c{j}")))?;
    for r in rows {
        w.write_record(r.iter().map(f64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

/// Loss curves with the baselines as dashed horizontal lines.
pub fn loss_chart(log: &MetricsLog) -> LineChart {
    let pts = |f: fn(&crate::training::MetricsRow) -> f64| log.rows.iter().map(|r| (r.iter as f64, f(r))).collect();
    let (x0, x1) = (
        log.rows.first().map_or(0.0, |r| r.iter as f64),
        log.rows.last().map_or(1.0, |r| r.iter as f64),
    );
    let mut series = vec![Series::solid("test CE", pts(|r| r.test_ce)), Series::solid("train CE", pts(|r| r.train_ce))];
    series.extend(log.baselines.iter().map(|&(k, b)| Series::dashed(format!("{k}-gram"), vec![(x0, b), (x1, b)])));
    LineChart { title: "cross-entropy".into(), x_label: "iteration".into(), y_label: "nats".into(), log_y: false, series }
}

/// Total and per-group gradient norms, log scale.
pub fn grad_norm_chart(log: &MetricsLog) -> LineChart {
    let mut series = vec![Series::solid(
        "total",
        log.rows.iter().map(|r| (r.iter as f64, r.grad_norm_total)).collect(),
    )];
    for (g, name) in ["A1", "V1", "K2", "Q2"].iter().enumerate() {
        series.push(Series::solid(*name, log.rows.iter().map(|r| (r.iter as f64, r.grad_norm_groups[g])).collect()));
    }
    LineChart { title: "gradient norm".into(), x_label: "iteration".into(), y_label: "norm".into(), log_y: true, series }
}

/// Writes every artifact of one training run into `out`.
pub fn write_run(out: &Path, cfg: &TrainConfig, log: &MetricsLog, params: &ModelParams, figures: bool) -> Result<()> {
    prepare_out(out)?;
    log.write_csv(fs::File::create(out.join("metrics.csv"))?)?;
    log.write_plateaus_csv(fs::File::create(out.join("plateaus.csv"))?)?;
    let snaps = out.join("snapshots");
    prepare_out(&snaps)?;
    for s in &log.snapshots {
        for (h, a) in s.a1.iter().enumerate() {
            let rows = a.rows().into_iter().map(|r| r.to_vec());
            write_matrix_csv(&snaps.join(format!("a1_iter{}_head{h}.csv", s.iter)), rows, a.ncols())?;
            if figures {
                let m: Vec<Vec<f64>> = a.rows().into_iter().map(|r| r.to_vec()).collect();
                let title = format!("layer-1 head {h}, iteration {}", s.iter);
                fs::write(out.join(format!("attention_iter{}_head{h}.svg", s.iter)), heatmap_svg(&title, &m))?;
            }
        }
        let mut w = csv::Writer::from_path(snaps.join(format!("a2_iter{}.csv", s.iter)))?;
        w.write_record(["position", "weight"])?;
        for (i, x) in s.a2.iter().enumerate() {
            w.write_record([i.to_string(), x.to_string()])?;
        }
        w.flush()?;
    }
    write_json(&out.join("params.json"), params)?;
    if figures {
        fs::write(out.join("loss.svg"), loss_chart(log).to_svg())?;
        fs::write(out.join("grad_norm.svg"), grad_norm_chart(log).to_svg())?;
    }
    write_manifest(out, "train", cfg)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train(&a.common, &a.flags)?;
    prepare_out(&a.common.out)?;
    let outcome = train(&cfg)?;
    write_run(&a.common.out, &cfg, &outcome.log, &outcome.params, !a.no_figures)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    if a.seeds.len() < 2 {
        return Err(Error::InsufficientSeeds(a.seeds.len()));
    }
    let base = resolve_train(&a.common, &a.flags)?;
    prepare_out(&a.common.out)?;
    let mut summaries = Vec::new();
    for &seed in &a.seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.task.seed = seed;
        let outcome = train(&cfg)?;
        write_run(&a.common.out.join(format!("seed{seed}")), &cfg, &outcome.log, &outcome.params, true)?;
        summaries.push(summarise(seed, &outcome.log));
    }
    write_json(&a.common.out.join("sweep.json"), &summaries)?;
    write_manifest(&a.common.out, "sweep", &(base, &a.seeds))
}

/// Header and numeric rows of a CSV file.
pub fn read_numeric_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    if !path.exists() {
        return Err(invalid(format!("input file {} does not exist", path.display())));
    }
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        rows.push(rec.iter().map(|f| f.trim().parse::<f64>().unwrap_or(f64::NAN)).collect());
    }
    Ok((header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| invalid(format!("no column named {name:?}")))
}

pub fn render_svg(a: &RenderArgs) -> Result<String> {
    let (header, rows) = read_numeric_csv(&a.input)?;
    match a.kind {
        ChartKind::Heatmap => Ok(heatmap_svg(&a.title, &rows)),
        ChartKind::Line => {
            let xi = column(&header, &a.x)?;
            let ys: Vec<String> = if a.y.is_empty() && a.dashed.is_empty() {
                header.iter().filter(|h| **h != a.x).cloned().collect()
            } else {
                a.y.clone()
            };
            let pick = |name: &String, dashed: bool| -> Result<Series> {
                let yi = column(&header, name)?;
                let pts = rows.iter().map(|r| (r[xi], r[yi])).collect();
                Ok(Series { name: name.clone(), points: pts, dashed })
            };
            let mut series = ys.iter().map(|y| pick(y, false)).collect::<Result<Vec<_>>>()?;
            series.extend(a.dashed.iter().map(|y| pick(y, true)).collect::<Result<Vec<_>>>()?);
            Ok(LineChart { title: a.title.clone(), x_label: a.x.clone(), y_label: String::new(), log_y: a.log_y, series }
                .to_svg())
        }
    }
}

fn cmd_render(a: &RenderArgs) -> Result<()> {
    let svg = render_svg(a)?;
    if let Some(parent) = a.output.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(&a.output, svg)?;
    Ok(())
}
