//! The `sgd-initlab` experiment harness.
//!
//! Commands: `train`, `sweep`, `langevin`, `theory`, `sigma-search` and
//! `plot`. Every command writes CSV and/or JSON into `--out` and, with
//! `--plot`, SVG figures rendered from those CSV files.
//!
//! `--config <file>` reads flat `key = value` lines (`#` starts a comment).
//! Each line becomes `--key value` (a boolean `true` becomes a bare `--key`)
//! and is placed before the command-line flags, so explicit flags win.
//!
//! Exit codes: 0 success, 2 usage or input error, 3 internal invariant
//! violation.

use std::ffi::OsString;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{self, BlobSpec, Dataset};
use crate::error::{Error, Result};
use crate::langevin::{self, QuadraticModel, SimConfig, StationaryReport};
use crate::optimize::{self, InitScheme, RunRecord, TrainConfig, STREAM_NOISE_PROBE};
use crate::plot;
use crate::stats::{self, RunSummary};
use crate::tensor::{rng_fork, Matrix};
use crate::theory::{self, BoundInputs, BoundRow};

/// Column order of `runs.csv`.
pub const RUNS_HEADER: [&str; 11] = [
    "run_id",
    "seed",
    "sigma0",
    "epoch",
    "train_loss",
    "val_loss",
    "val_acc",
    "vbar",
    "mean_norm_sq",
    "centered_var",
    "diverged",
];

/// Column order of `sweep.csv`.
pub const SWEEP_HEADER: [&str; 6] = [
    "sigma0",
    "final_loss_mean",
    "final_loss_std",
    "final_vbar_mean",
    "ratio",
    "acc_mean",
];

/// Relative change of the mean training loss over the last fifth of training
/// below which a run counts as plateaued.
pub const PLATEAU_TOLERANCE: f64 = 0.05;

/// Comma-separated list flag.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T>
where
    T::Err: Display,
{
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|e| format!("bad list element `{}`: {e}", t.trim()))
            })
            .collect::<std::result::Result<_, _>>()
            .map(List)
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "sgd-initlab",
    version,
    about = "Initialization-variance experiments for SGD",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Train one configuration over one or more seeds.
    Train(TrainArgs),
    /// Train every sigma0 of a grid and tabulate final loss and vbar / sigma0^2.
    Sweep(SweepArgs),
    /// Simulate SGD on a quadratic and compare with the Gibbs covariance.
    Langevin(LangevinArgs),
    /// Tabulate the KL loss bound against sigma0^2.
    Theory(TheoryArgs),
    /// Damped fixed-point iteration sigma0^2 <- vbar(sigma0^2).
    SigmaSearch(SearchArgs),
    /// Re-render SVG figures from existing CSV files.
    Plot(PlotArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CommonArgs {
    /// Base seed (data generation; default run seed).
    #[arg(long, env = "SGD_INITLAB_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Flat key=value file of default flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Also write SVG figures.
    #[arg(long)]
    pub plot: bool,
    /// Concurrent training runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct DataArgs {
    /// Synthetic blobs, e.g. `d=20,M=3,n=3000[,sep=3,sigma=1,val=600]`
    /// (`n` and `val` are total example counts).
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long)]
    pub train_images: Option<PathBuf>,
    #[arg(long)]
    pub train_labels: Option<PathBuf>,
    #[arg(long)]
    pub val_images: Option<PathBuf>,
    #[arg(long)]
    pub val_labels: Option<PathBuf>,
    /// Class count for IDX data.
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Keep the first N training and first ceil(N/5) validation examples.
    #[arg(long)]
    pub subset: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum InitArg {
    Gaussian,
    #[value(name = "he_normal", alias = "he-normal")]
    HeNormal,
}

impl From<InitArg> for InitScheme {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Gaussian => InitScheme::Gaussian,
            InitArg::HeNormal => InitScheme::HeNormal,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeAt {
    Init,
    Warmup,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 100)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.15)]
    pub sigma0: f64,
    #[arg(long, value_enum, default_value_t = InitArg::Gaussian)]
    pub init: InitArg,
    /// Run seeds, e.g. `1,2,3` (default: `--seed`).
    #[arg(long)]
    pub seeds: Option<List<u64>>,
    /// Hidden widths, e.g. `128,128`; empty for a linear softmax model.
    #[arg(long, default_value = "128,128")]
    pub hidden: List<usize>,
    #[arg(long)]
    pub biases: bool,
    #[arg(long, default_value_t = 10)]
    pub record_every: usize,
    /// Where the gradient-noise scale is measured.
    #[arg(long, value_enum, default_value_t = ProbeAt::Warmup)]
    pub noise_probe_at: ProbeAt,
    /// SGD steps before the warm-up noise probe.
    #[arg(long, default_value_t = 100)]
    pub warmup_steps: usize,
    /// Examples used by the noise probe (0 disables it).
    #[arg(long, default_value_t = 1000)]
    pub noise_probes: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// sigma0 values (default: 12 log-spaced values in [0.01, 1]).
    #[arg(long)]
    pub grid: Option<List<f64>>,
    /// Add a He-normal row.
    #[arg(long)]
    pub he_baseline: bool,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SearchArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    #[arg(long, default_value_t = 10)]
    pub max_iters: usize,
    /// Weight of the new vbar in each update.
    #[arg(long, default_value_t = 0.5)]
    pub damping: f64,
    /// Stop when |vbar / sigma0^2 - 1| falls below this.
    #[arg(long, default_value_t = 0.05)]
    pub tol: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct QuadArgs {
    /// Diagonal Hessian, e.g. `1,2,3,4`.
    #[arg(long)]
    pub diag: Option<List<f64>>,
    /// Full Hessian, rows separated by `;`, e.g. `2,1;1,2`.
    #[arg(long, conflicts_with = "diag")]
    pub matrix: Option<String>,
}

impl QuadArgs {
    fn is_set(&self) -> bool {
        self.diag.is_some() || self.matrix.is_some()
    }

    fn build(&self) -> Result<QuadraticModel> {
        match (&self.diag, &self.matrix) {
            (Some(d), _) => QuadraticModel::diagonal(&d.0),
            (None, Some(m)) => QuadraticModel::new(parse_matrix(m)?),
            (None, None) => Err(Error::invalid("pass --diag or --matrix")),
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct LangevinArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub quad: QuadArgs,
    #[arg(long, default_value_t = 0.01)]
    pub alpha: f64,
    #[arg(long, default_value_t = 10)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_sq: f64,
    #[arg(long, default_value_t = 400_000)]
    pub steps: usize,
    /// Fraction of steps discarded as burn-in.
    #[arg(long, default_value_t = 0.5)]
    pub burn_in: f64,
    /// Std of the initial iterate.
    #[arg(long, default_value_t = 0.0)]
    pub sigma0: f64,
    /// Relative Frobenius tolerance for the pass/fail verdict.
    #[arg(long, default_value_t = 0.05)]
    pub tolerance: f64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct TheoryArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Quadratic loss; gives exact E||W||^2 and log C.
    #[command(flatten)]
    pub quad: QuadArgs,
    #[arg(long, default_value_t = 1e-4)]
    pub alpha: f64,
    #[arg(long, default_value_t = 100)]
    pub batch: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_sq: f64,
    /// Parameter count (without a quadratic).
    #[arg(long)]
    pub k: Option<usize>,
    /// Stationary E||W||^2 (without a quadratic).
    #[arg(long)]
    pub e_w_sq: Option<f64>,
    /// log C (without a quadratic); the bound is then "up to log C".
    #[arg(long, default_value_t = 0.0)]
    pub log_c: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub grid_min: f64,
    #[arg(long, default_value_t = 1e3)]
    pub grid_max: f64,
    #[arg(long, default_value_t = 61)]
    pub grid_points: usize,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PlotArgs {
    #[arg(long)]
    pub runs: Option<PathBuf>,
    #[arg(long)]
    pub sweep: Option<PathBuf>,
    #[arg(long)]
    pub theory: Option<PathBuf>,
    #[arg(long)]
    pub search: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Parses `1,2;3,4` into a square matrix.
pub fn parse_matrix(s: &str) -> Result<Matrix> {
    let rows: Vec<Vec<f64>> = s
        .split(';')
        .map(|r| {
            r.split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|e| Error::invalid(format!("bad matrix entry `{t}`: {e}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Matrix::from_rows(&rows)
}

/// Parses `d=20,M=3,n=300[,sep=..,sigma=..,val=..]`.
pub fn parse_synthetic(s: &str) -> Result<(BlobSpec, usize)> {
    let (mut d, mut m, mut n) = (None, None, None);
    let (mut sep, mut sigma, mut val) = (3.0, 1.0, None);
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("expected key=value in `{part}`")))?;
        let v = v.trim();
        let bad = |e: &dyn Display| Error::invalid(format!("bad value for `{k}`: {e}"));
        match k.trim() {
            "d" => d = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
            "M" | "m" => m = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
            "n" => n = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
            "val" => val = Some(v.parse::<usize>().map_err(|e| bad(&e))?),
            "sep" | "separation" => sep = v.parse().map_err(|e| bad(&e))?,
            "sigma" => sigma = v.parse().map_err(|e| bad(&e))?,
            other => return Err(Error::invalid(format!("unknown synthetic key `{other}`"))),
        }
    }
    let (d, m, n) = match (d, m, n) {
        (Some(d), Some(m), Some(n)) => (d, m, n),
        _ => return Err(Error::invalid("synthetic data needs d, M and n")),
    };
    if m < 2 || n < m {
        return Err(Error::invalid(format!("need M >= 2 and n >= M (got M={m}, n={n})")));
    }
    let spec = BlobSpec {
        dim: d,
        classes: m,
        per_class: n / m,
        separation: sep,
        sigma,
    };
    let val_per_class = (val.unwrap_or(n / 5) / m).max(1);
    Ok((spec, val_per_class))
}

/// Training and validation sets.
pub struct Data {
    pub train: Dataset,
    pub val: Dataset,
}

#[derive(Serialize)]
struct DataInfo<'a> {
    name: &'a str,
    n_train: usize,
    n_val: usize,
    input_dim: usize,
    classes: usize,
}

impl Data {
    fn info(&self) -> DataInfo<'_> {
        DataInfo {
            name: self.train.name(),
            n_train: self.train.len(),
            n_val: self.val.len(),
            input_dim: self.train.input_dim(),
            classes: self.train.num_classes(),
        }
    }
}

pub fn load_data(args: &DataArgs, seed: u64) -> Result<Data> {
    let (train, val) = match (&args.synthetic, &args.train_images) {
        (Some(_), Some(_)) => {
            return Err(Error::invalid("use either --synthetic or IDX files, not both"))
        }
        (Some(spec), None) => {
            let (train_spec, val_per_class) = parse_synthetic(spec)?;
            let val_spec = BlobSpec {
                per_class: val_per_class,
                ..train_spec
            };
            (
                data::synthetic_blobs_from(&train_spec, &mut rng_fork(seed, 100))?,
                data::synthetic_blobs_from(&val_spec, &mut rng_fork(seed, 101))?,
            )
        }
        (None, Some(images)) => {
            let need = |p: &Option<PathBuf>, flag: &str| {
                p.clone()
                    .ok_or_else(|| Error::invalid(format!("IDX input needs {flag}")))
            };
            let labels = need(&args.train_labels, "--train-labels")?;
            let val_images = need(&args.val_images, "--val-images")?;
            let val_labels = need(&args.val_labels, "--val-labels")?;
            (
                data::load_idx_dataset(images, &labels, args.classes, "idx-train")?,
                data::load_idx_dataset(&val_images, &val_labels, args.classes, "idx-val")?,
            )
        }
        (None, None) => {
            return Err(Error::invalid(
                "no data: pass --synthetic or --train-images/--train-labels/--val-images/--val-labels",
            ))
        }
    };
    match args.subset {
        Some(0) => Err(Error::invalid("--subset must be >= 1")),
        Some(n) => Ok(Data {
            train: train.take(n),
            val: val.take(n.div_ceil(5)),
        }),
        None => Ok(Data { train, val }),
    }
}

impl TrainArgs {
    pub fn to_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            batch_size: self.batch,
            epochs: self.epochs,
            sigma0: self.sigma0,
            init_scheme: self.init.into(),
            seeds: self
                .seeds
                .clone()
                .map(|s| s.0)
                .unwrap_or_else(|| vec![self.common.seed]),
            hidden_dims: self.hidden.0.clone(),
            biases: self.biases,
            record_every: self.record_every,
        }
    }
}

/// One training run plus its noise-scale probe.
#[derive(Clone, Debug)]
pub struct Cell {
    pub run_id: String,
    pub record: RunRecord,
    pub sigma_hat_sq: Option<f64>,
}

fn run_cell(
    config: &TrainConfig,
    args: &TrainArgs,
    data: &Data,
    seed: u64,
    run_id: String,
) -> Result<Cell> {
    let dims = config.layer_dims(data.train.input_dim(), data.train.num_classes());
    let initial = optimize::initial_model(config, &dims, seed)?;
    let probe = |model: &crate::model::MlpModel| {
        let mut rng = rng_fork(seed, STREAM_NOISE_PROBE);
        stats::estimate_noise_scale(model, &data.train, args.noise_probes, &mut rng)
    };
    let probing = args.noise_probes > 0;
    let mut sigma_hat_sq = match (probing, args.noise_probe_at) {
        (true, ProbeAt::Init) => Some(probe(&initial)?),
        _ => None,
    };
    let mut warm = None;
    let warmup = args.warmup_steps.max(1);
    let (record, final_model) =
        optimize::train_from(config, &data.train, &data.val, seed, initial, |step, m| {
            if step == warmup {
                warm = Some(m.clone());
            }
        })?;
    if probing && args.noise_probe_at == ProbeAt::Warmup && !record.diverged {
        sigma_hat_sq = Some(probe(warm.as_ref().unwrap_or(&final_model))?);
    }
    Ok(Cell {
        run_id,
        record,
        sigma_hat_sq,
    })
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))
}

/// Runs `(config, run_id, seed)` cells concurrently; results keep input order.
fn run_cells(
    jobs: usize,
    args: &TrainArgs,
    data: &Data,
    cells: Vec<(TrainConfig, String, u64)>,
) -> Result<Vec<Cell>> {
    thread_pool(jobs)?.install(|| {
        cells
            .into_par_iter()
            .map(|(cfg, id, seed)| run_cell(&cfg, args, data, seed, id))
            .collect()
    })
}

fn num(v: f64) -> String {
    format!("{v}")
}

fn sigma_label(scheme: InitScheme, sigma0: f64) -> String {
    match scheme {
        InitScheme::Gaussian => num(sigma0),
        InitScheme::HeNormal => "he_normal".into(),
    }
}

fn run_id(prefix: &str, scheme: InitScheme, sigma0: f64, seed: u64) -> String {
    match scheme {
        InitScheme::Gaussian => format!("{prefix}gaussian-{sigma0}-{seed}"),
        InitScheme::HeNormal => format!("{prefix}he_normal-{seed}"),
    }
}

fn csv_error(e: csv::Error) -> Error {
    Error::Invariant(format!("CSV encoding: {e}"))
}

fn csv_text(header: &[&str], rows: &[Vec<String>]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).map_err(csv_error)?;
    for r in rows {
        w.write_record(r).map_err(csv_error)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Invariant(format!("CSV flush: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Invariant(e.to_string()))
}

/// `runs.csv` text for a list of cells.
pub fn runs_csv(cells: &[Cell]) -> Result<String> {
    let mut rows = Vec::new();
    for c in cells {
        let r = &c.record;
        for s in &r.snapshots {
            rows.push(vec![
                c.run_id.clone(),
                r.seed.to_string(),
                sigma_label(r.init_scheme, r.sigma0),
                s.epoch.to_string(),
                num(s.train_loss),
                num(s.val_loss),
                num(s.val_acc),
                num(s.vbar),
                num(s.mean_norm_sq),
                num(s.centered_var),
                s.diverged.to_string(),
            ]);
        }
    }
    csv_text(&RUNS_HEADER, &rows)
}

/// Aggregate over the seeds of one initialization setting.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub init_scheme: InitScheme,
    pub sigma0: Option<f64>,
    /// `sigma0^2`, or the realised initial vbar for He-normal.
    pub init_variance: f64,
    pub n_runs: usize,
    pub n_diverged: usize,
    pub final_loss_mean: f64,
    pub final_loss_std: f64,
    pub final_vbar_mean: f64,
    pub ratio: f64,
    pub acc_mean: f64,
    pub num_params: usize,
    /// Mean estimated gradient-noise scale.
    pub sigma_hat_sq_mean: Option<f64>,
    /// `alpha sigma_hat^2 / (4 b sigma0^2)`.
    pub k1: Option<f64>,
    pub k1_vbar: Option<f64>,
    /// Mean final training loss divided by the parameter count.
    pub loss_per_param: f64,
    pub plateaued: bool,
    pub summary: Option<RunSummary>,
}

/// Whether the mean training loss moved less than [`PLATEAU_TOLERANCE`]
/// (relative) over the last fifth of the recorded epochs.
pub fn plateaued(summary: &RunSummary) -> bool {
    let epochs = &summary.epochs;
    let last = *epochs.last().unwrap();
    let cut = last - last / 5;
    let i = epochs.iter().position(|&e| e >= cut).unwrap_or(0);
    let (a, b) = (summary.train_loss.mean[i], summary.train_loss.last_mean());
    epochs.len() > 1 && i + 1 < epochs.len() && ((a - b) / b).abs() < PLATEAU_TOLERANCE
}

fn sweep_row(config: &TrainConfig, cells: &[&Cell]) -> Result<SweepRow> {
    let scheme = config.init_scheme;
    let ok: Vec<&RunRecord> = cells
        .iter()
        .map(|c| &c.record)
        .filter(|r| !r.diverged)
        .collect();
    let n_diverged = cells.len() - ok.len();
    let sigma0 = (scheme == InitScheme::Gaussian).then_some(config.sigma0);
    let num_params = cells.first().map_or(0, |c| c.record.num_params);
    let probes: Vec<f64> = cells.iter().filter_map(|c| c.sigma_hat_sq).collect();
    let sigma_hat_sq_mean =
        (!probes.is_empty()).then(|| probes.iter().sum::<f64>() / probes.len() as f64);
    if ok.is_empty() {
        return Ok(SweepRow {
            label: sigma_label(scheme, config.sigma0),
            init_scheme: scheme,
            sigma0,
            init_variance: cells.first().map_or(f64::NAN, |c| c.record.init_variance()),
            n_runs: cells.len(),
            n_diverged,
            final_loss_mean: f64::NAN,
            final_loss_std: f64::NAN,
            final_vbar_mean: f64::NAN,
            ratio: f64::NAN,
            acc_mean: f64::NAN,
            num_params,
            sigma_hat_sq_mean,
            k1: None,
            k1_vbar: None,
            loss_per_param: f64::NAN,
            plateaued: false,
            summary: None,
        });
    }
    let summary = stats::aggregate_refs(&ok)?;
    let ratio = stats::steady_state_ratio(summary.final_vbar_mean(), summary.init_variance)
        .unwrap_or(f64::NAN);
    let k1 = match sigma_hat_sq_mean {
        Some(s) if s > 0.0 && config.alpha > 0.0 && summary.init_variance > 0.0 => Some(
            theory::small_variance_bound_coefficient(
                config.alpha,
                config.batch_size,
                s,
                summary.init_variance,
            )?,
        ),
        _ => None,
    };
    let final_loss_mean = summary.train_loss.last_mean();
    Ok(SweepRow {
        label: sigma_label(scheme, config.sigma0),
        init_scheme: scheme,
        sigma0,
        init_variance: summary.init_variance,
        n_runs: cells.len(),
        n_diverged,
        final_loss_mean,
        final_loss_std: summary.train_loss.last_std(),
        final_vbar_mean: summary.final_vbar_mean(),
        ratio,
        acc_mean: summary.val_acc.last_mean(),
        num_params,
        sigma_hat_sq_mean,
        k1,
        k1_vbar: k1.map(|k| k * summary.final_vbar_mean()),
        loss_per_param: final_loss_mean / num_params as f64,
        plateaued: plateaued(&summary),
        summary: Some(summary),
    })
}

/// `sweep.csv` text.
pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.label.clone(),
                num(r.final_loss_mean),
                num(r.final_loss_std),
                num(r.final_vbar_mean),
                num(r.ratio),
                num(r.acc_mean),
            ]
        })
        .collect();
    csv_text(&SWEEP_HEADER, &rows)
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".sgd-initlab-write-test");
    fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn write_json(dir: &Path, name: &str, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Invariant(format!("JSON encoding: {e}")))?;
    text.push('\n');
    write_file(dir, name, &text)
}

fn write_run_plots(dir: &Path, runs: &str) -> Result<()> {
    write_file(dir, "variance_trace.svg", &plot::variance_trace(runs)?)?;
    write_file(dir, "loss_trace.svg", &plot::loss_trace(runs)?)
}

fn write_sweep_plots(dir: &Path, sweep: &str) -> Result<()> {
    write_file(dir, "final_loss_vs_sigma0.svg", &plot::sweep_loss(sweep)?)?;
    write_file(dir, "ratio_vs_sigma0.svg", &plot::sweep_ratio(sweep)?)
}

#[derive(Serialize)]
struct SweepSummary<'a, C: Serialize> {
    command: &'a str,
    config: &'a C,
    data: DataInfo<'a>,
    rows: &'a [SweepRow],
    /// Grid sigma0 whose ratio is closest to 1.
    closest_ratio_sigma0: Option<f64>,
    /// Grid sigma0 with the lowest mean final training loss.
    min_loss_sigma0: Option<f64>,
}

fn gaussian_rows(rows: &[SweepRow]) -> impl Iterator<Item = &SweepRow> {
    rows.iter()
        .filter(|r| r.init_scheme == InitScheme::Gaussian && r.ratio.is_finite())
}

/// Grid row whose `vbar / sigma0^2` is closest to 1 (in log distance).
pub fn closest_ratio(rows: &[SweepRow]) -> Option<&SweepRow> {
    gaussian_rows(rows).min_by(|a, b| a.ratio.ln().abs().total_cmp(&b.ratio.ln().abs()))
}

/// Grid row with the lowest mean final training loss.
pub fn min_loss(rows: &[SweepRow]) -> Option<&SweepRow> {
    gaussian_rows(rows).min_by(|a, b| a.final_loss_mean.total_cmp(&b.final_loss_mean))
}

fn default_grid() -> Vec<f64> {
    theory::log_grid(0.01, 1.0, 12).expect("fixed grid bounds are valid")
}

/// Trains every grid value (and optional He-normal baseline) for every seed.
pub fn sweep_cells(
    args: &TrainArgs,
    grid: &[f64],
    he_baseline: bool,
    data: &Data,
) -> Result<(Vec<TrainConfig>, Vec<Cell>)> {
    let base = args.to_config();
    base.validate(data.train.len())?;
    let mut configs: Vec<TrainConfig> = grid
        .iter()
        .map(|&s| TrainConfig {
            sigma0: s,
            ..base.clone()
        })
        .collect();
    if he_baseline {
        configs.push(TrainConfig {
            init_scheme: InitScheme::HeNormal,
            ..base.clone()
        });
    }
    let jobs = configs
        .iter()
        .flat_map(|c| {
            c.seeds
                .iter()
                .map(move |&seed| (c.clone(), run_id("", c.init_scheme, c.sigma0, seed), seed))
        })
        .collect();
    let cells = run_cells(args.common.jobs, args, data, jobs)?;
    Ok((configs, cells))
}

fn group_rows(configs: &[TrainConfig], cells: &[Cell]) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::with_capacity(configs.len());
    let mut offset = 0;
    for c in configs {
        let n = c.seeds.len();
        let group: Vec<&Cell> = cells[offset..offset + n].iter().collect();
        rows.push(sweep_row(c, &group)?);
        offset += n;
    }
    Ok(rows)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invalid("sigma0 grid is empty"));
    }
    if grid.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("sigma0 grid values must be finite and > 0"));
    }
    if grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sigma0 grid must be strictly increasing"));
    }
    Ok(())
}

fn print_rows(rows: &[SweepRow]) {
    println!(
        "{:>12} {:>14} {:>14} {:>10} {:>8} {:>5}",
        "sigma0", "final_loss", "final_vbar", "ratio", "acc", "div"
    );
    for r in rows {
        println!(
            "{:>12} {:>14.6e} {:>14.6e} {:>10.4} {:>8.4} {:>5}",
            r.label, r.final_loss_mean, r.final_vbar_mean, r.ratio, r.acc_mean, r.n_diverged
        );
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let out = &args.common.out;
    prepare_out_dir(out)?;
    let data = load_data(&args.data, args.common.seed)?;
    let grid = [args.sigma0];
    let (configs, cells) = sweep_cells(args, &grid, false, &data)?;
    let rows = group_rows(&configs, &cells)?;
    let runs = runs_csv(&cells)?;
    write_file(out, "runs.csv", &runs)?;
    write_json(
        out,
        "summary.json",
        &SweepSummary {
            command: "train",
            config: args,
            data: data.info(),
            rows: &rows,
            closest_ratio_sigma0: None,
            min_loss_sigma0: None,
        },
    )?;
    if args.common.plot {
        write_run_plots(out, &runs)?;
    }
    print_rows(&rows);
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let out = &args.train.common.out;
    let grid = args.grid.clone().map_or_else(default_grid, |g| g.0);
    check_grid(&grid)?;
    if args.train.init == InitArg::HeNormal {
        return Err(Error::invalid(
            "sweep varies the Gaussian sigma0; use --he-baseline for He-normal",
        ));
    }
    prepare_out_dir(out)?;
    let data = load_data(&args.train.data, args.train.common.seed)?;
    let (configs, cells) = sweep_cells(&args.train, &grid, args.he_baseline, &data)?;
    let rows = group_rows(&configs, &cells)?;
    let runs = runs_csv(&cells)?;
    let sweep = sweep_csv(&rows)?;
    write_file(out, "runs.csv", &runs)?;
    write_file(out, "sweep.csv", &sweep)?;
    write_json(
        out,
        "summary.json",
        &SweepSummary {
            command: "sweep",
            config: args,
            data: data.info(),
            rows: &rows,
            closest_ratio_sigma0: closest_ratio(&rows).and_then(|r| r.sigma0),
            min_loss_sigma0: min_loss(&rows).and_then(|r| r.sigma0),
        },
    )?;
    if args.train.common.plot {
        write_run_plots(out, &runs)?;
        write_sweep_plots(out, &sweep)?;
    }
    print_rows(&rows);
    Ok(())
}

#[derive(Serialize)]
struct LangevinOutput<'a> {
    command: &'a str,
    config: &'a LangevinArgs,
    report: &'a StationaryReport,
}

fn cmd_langevin(args: &LangevinArgs) -> Result<()> {
    let out = &args.common.out;
    prepare_out_dir(out)?;
    let quad = if args.quad.is_set() {
        args.quad.build()?
    } else {
        QuadraticModel::diagonal(&[1.0, 2.0, 3.0, 4.0])?
    };
    let cfg = SimConfig {
        alpha: args.alpha,
        batch: args.batch,
        sigma_sq: args.sigma_sq,
        steps: args.steps,
        burn_in_fraction: args.burn_in,
        sigma0: args.sigma0,
        seed: args.common.seed,
    };
    let report = langevin::verify_stationary(&quad, &cfg, args.tolerance)?;
    write_json(
        out,
        "langevin.json",
        &LangevinOutput {
            command: "langevin",
            config: args,
            report: &report,
        },
    )?;
    let err = report
        .relative_frobenius_error
        .map_or("n/a".to_string(), |e| format!("{e:.4}"));
    println!(
        "alpha*lambda_max = {:.4}, retained = {}, relative Frobenius error = {err}, {}{}",
        report.alpha_lambda_max,
        report.retained_samples,
        if report.passed { "PASS" } else { "FAIL" },
        if report.deterministic_collapse {
            " (deterministic collapse)"
        } else {
            ""
        }
    );
    Ok(())
}

#[derive(Serialize)]
struct TheoryOutput<'a> {
    command: &'a str,
    config: &'a TheoryArgs,
    inputs: BoundInputs,
    /// False when log C was supplied rather than computed: the bound then
    /// holds only up to the log C term.
    exact_log_c: bool,
    optimal_sigma0: f64,
    optimum: BoundRow,
    optimized_bound: f64,
    /// Quadratic only: `E_ss[L / K]`.
    expected_loss_per_param: Option<f64>,
    /// Quadratic only: optimized bound minus `E_ss[L / K]`.
    tightness_gap: Option<f64>,
    /// Quadratic only: `KL(p_ss || p0)` at the optimal `sigma0`.
    kl_at_optimum: Option<f64>,
}

fn cmd_theory(args: &TheoryArgs) -> Result<()> {
    let out = &args.common.out;
    let quad = if args.quad.is_set() {
        Some(args.quad.build()?)
    } else {
        None
    };
    let inputs = match &quad {
        Some(q) => theory::quadratic_bound_inputs(q, args.alpha, args.batch, args.sigma_sq, 1.0)?,
        None => {
            let (k, e_w_sq) = args.k.zip(args.e_w_sq).ok_or_else(|| {
                Error::invalid("theory needs --diag/--matrix or both --k and --e-w-sq")
            })?;
            let inputs = BoundInputs {
                alpha: args.alpha,
                b: args.batch,
                sigma_sq: args.sigma_sq,
                sigma0_sq: 1.0,
                k,
                e_w_sq,
                log_c: args.log_c,
            };
            inputs.validate()?;
            inputs
        }
    };
    let grid = theory::log_grid(args.grid_min, args.grid_max, args.grid_points)?;
    prepare_out_dir(out)?;
    let table = theory::bound_table(&inputs, &grid)?;
    let optimal_sigma0 = theory::optimal_sigma0(inputs.e_w_sq, inputs.k)?;
    let at_opt = inputs.with_sigma0_sq(inputs.vbar());
    let optimum = theory::bound_row(&at_opt)?;
    let optimized_bound = theory::optimized_bound_rhs(&inputs)?;
    let expected = quad
        .as_ref()
        .map(|q| theory::expected_loss_per_param(q, args.alpha, args.batch, args.sigma_sq));
    let kl_at_optimum = match &quad {
        Some(q) => Some(theory::kl_gaussian_init_vs_gibbs(
            q,
            args.alpha,
            args.batch,
            args.sigma_sq,
            at_opt.sigma0_sq,
        )?),
        None => None,
    };

    let row = |kind: &str, r: &BoundRow| {
        vec![
            kind.to_string(),
            num(r.sigma0_sq),
            num(r.rhs),
            num(r.small_variance_term),
            num(r.large_variance_term),
        ]
    };
    let mut rows: Vec<Vec<String>> = table.iter().map(|r| row("grid", r)).collect();
    rows.push(row("optimum", &optimum));
    let csv = csv_text(
        &["kind", "sigma0_sq", "rhs", "k1_vbar", "k2_log_sigma0_sq"],
        &rows,
    )?;
    write_file(out, "theory.csv", &csv)?;
    write_json(
        out,
        "theory.json",
        &TheoryOutput {
            command: "theory",
            config: args,
            inputs,
            exact_log_c: quad.is_some(),
            optimal_sigma0,
            optimum,
            optimized_bound,
            expected_loss_per_param: expected,
            tightness_gap: expected.map(|e| optimized_bound - e),
            kl_at_optimum,
        },
    )?;
    if args.common.plot {
        write_file(out, "bound.svg", &plot::theory_bound(&csv)?)?;
    }
    println!(
        "optimal sigma0 = {optimal_sigma0:.6e} (sigma0^2 = {:.6e}), optimized bound = {optimized_bound:.6e}{}",
        at_opt.sigma0_sq,
        if quad.is_some() { "" } else { " (up to the log C term)" }
    );
    if let Some(e) = expected {
        println!(
            "E_ss[L/K] = {e:.6e}, gap = {:.3e}",
            optimized_bound - e
        );
    }
    Ok(())
}

/// One iterate of the fixed-point search.
#[derive(Clone, Debug, Serialize)]
pub struct SearchStep {
    pub iteration: usize,
    pub sigma0: f64,
    pub sigma0_sq: f64,
    pub final_vbar_mean: f64,
    pub ratio: f64,
    pub final_loss_mean: f64,
    pub n_diverged: usize,
    pub converged: bool,
}

#[derive(Serialize)]
struct SearchOutput<'a> {
    command: &'a str,
    config: &'a SearchArgs,
    data: DataInfo<'a>,
    trajectory: &'a [SearchStep],
    converged: bool,
    /// Iterate whose ratio is closest to 1.
    recommended_sigma0: Option<f64>,
}

fn cmd_sigma_search(args: &SearchArgs) -> Result<()> {
    let out = &args.train.common.out;
    if args.max_iters < 1 {
        return Err(Error::invalid("--max-iters must be >= 1"));
    }
    if !(args.damping > 0.0 && args.damping <= 1.0) {
        return Err(Error::invalid("--damping must lie in (0, 1]"));
    }
    if !(args.sigma_positive()) {
        return Err(Error::invalid("sigma-search needs --sigma0 > 0"));
    }
    if args.train.init == InitArg::HeNormal {
        return Err(Error::invalid("sigma-search iterates the Gaussian sigma0"));
    }
    prepare_out_dir(out)?;
    let data = load_data(&args.train.data, args.train.common.seed)?;
    let gamma = args.damping;
    let mut s2 = args.train.sigma0 * args.train.sigma0;
    let mut last_good: Option<f64> = None;
    let mut steps = Vec::new();
    let mut all_cells = Vec::new();

    for iteration in 1..=args.max_iters {
        let sigma0 = s2.sqrt();
        let mut iter_args = args.train.clone();
        iter_args.sigma0 = sigma0;
        let base = iter_args.to_config();
        base.validate(data.train.len())?;
        let jobs = base
            .seeds
            .iter()
            .map(|&seed| {
                let id = run_id(&format!("iter{iteration}-"), base.init_scheme, sigma0, seed);
                (base.clone(), id, seed)
            })
            .collect();
        let cells = run_cells(args.train.common.jobs, &iter_args, &data, jobs)?;
        let row = sweep_row(&base, &cells.iter().collect::<Vec<_>>())?;
        let converged = row.ratio.is_finite() && (row.ratio - 1.0).abs() < args.tol;
        steps.push(SearchStep {
            iteration,
            sigma0,
            sigma0_sq: s2,
            final_vbar_mean: row.final_vbar_mean,
            ratio: row.ratio,
            final_loss_mean: row.final_loss_mean,
            n_diverged: row.n_diverged,
            converged,
        });
        all_cells.extend(cells);
        if converged {
            break;
        }
        s2 = if row.final_vbar_mean.is_finite() && row.final_vbar_mean > 0.0 {
            last_good = Some(s2);
            (1.0 - gamma) * s2 + gamma * row.final_vbar_mean
        } else {
            // every seed diverged: step back towards the last usable iterate
            (1.0 - gamma) * s2 + gamma * last_good.unwrap_or(0.0)
        };
        if !(s2 > 0.0) {
            return Err(Error::invalid(
                "sigma-search has no usable iterate (all trainings diverged)",
            ));
        }
    }

    let rows: Vec<Vec<String>> = steps
        .iter()
        .map(|s| {
            vec![
                s.iteration.to_string(),
                num(s.sigma0),
                num(s.sigma0_sq),
                num(s.final_vbar_mean),
                num(s.ratio),
                num(s.final_loss_mean),
                s.n_diverged.to_string(),
                s.converged.to_string(),
            ]
        })
        .collect();
    let csv = csv_text(
        &[
            "iteration",
            "sigma0",
            "sigma0_sq",
            "final_vbar_mean",
            "ratio",
            "final_loss_mean",
            "n_diverged",
            "converged",
        ],
        &rows,
    )?;
    let runs = runs_csv(&all_cells)?;
    write_file(out, "sigma_search.csv", &csv)?;
    write_file(out, "runs.csv", &runs)?;
    let converged = steps.last().is_some_and(|s| s.converged);
    let recommended = steps
        .iter()
        .filter(|s| s.ratio.is_finite())
        .min_by(|a, b| (a.ratio - 1.0).abs().total_cmp(&(b.ratio - 1.0).abs()))
        .map(|s| s.sigma0);
    write_json(
        out,
        "sigma_search.json",
        &SearchOutput {
            command: "sigma-search",
            config: args,
            data: data.info(),
            trajectory: &steps,
            converged,
            recommended_sigma0: recommended,
        },
    )?;
    if args.train.common.plot {
        write_file(out, "sigma_search.svg", &plot::search_trajectory(&csv)?)?;
        write_run_plots(out, &runs)?;
    }
    for s in &steps {
        println!(
            "iter {:>3}: sigma0 = {:.6}, vbar = {:.6e}, ratio = {:.4}, loss = {:.6e}",
            s.iteration, s.sigma0, s.final_vbar_mean, s.ratio, s.final_loss_mean
        );
    }
    match recommended {
        Some(s) => println!(
            "recommended sigma0 = {s:.6}{}",
            if converged { "" } else { " (not converged)" }
        ),
        None => println!("no usable iterate"),
    }
    Ok(())
}

impl SearchArgs {
    fn sigma_positive(&self) -> bool {
        self.train.sigma0 > 0.0 && self.train.sigma0.is_finite()
    }
}

fn cmd_plot(args: &PlotArgs) -> Result<()> {
    let read = |p: &PathBuf| fs::read_to_string(p).map_err(|e| Error::io(p, e));
    if args.runs.is_none() && args.sweep.is_none() && args.theory.is_none() && args.search.is_none()
    {
        return Err(Error::invalid(
            "nothing to plot: pass --runs, --sweep, --theory or --search",
        ));
    }
    prepare_out_dir(&args.out)?;
    if let Some(p) = &args.runs {
        write_run_plots(&args.out, &read(p)?)?;
    }
    if let Some(p) = &args.sweep {
        write_sweep_plots(&args.out, &read(p)?)?;
    }
    if let Some(p) = &args.theory {
        write_file(&args.out, "bound.svg", &plot::theory_bound(&read(p)?)?)?;
    }
    if let Some(p) = &args.search {
        write_file(&args.out, "sigma_search.svg", &plot::search_trajectory(&read(p)?)?)?;
    }
    Ok(())
}

/// Flags whose config-file value is a boolean.
const BOOL_KEYS: [&str; 3] = ["plot", "biases", "he-baseline"];

/// Converts `key = value` lines into flag tokens.
pub fn config_tokens(text: &str) -> Result<Vec<OsString>> {
    let mut tokens = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::invalid(format!("config line {}: expected key = value", lineno + 1))
        })?;
        let key = key.trim().replace('_', "-");
        let value = value.trim();
        if key.is_empty() || key == "config" {
            return Err(Error::invalid(format!(
                "config line {}: invalid key `{key}`",
                lineno + 1
            )));
        }
        if BOOL_KEYS.contains(&key.as_str()) {
            match value {
                "true" => tokens.push(format!("--{key}").into()),
                "false" => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "config line {}: `{key}` takes true or false",
                        lineno + 1
                    )))
                }
            }
        } else {
            tokens.push(format!("--{key}").into());
            tokens.push(value.into());
        }
    }
    Ok(tokens)
}

/// Inserts the tokens of a `--config` file right after the subcommand so
/// that flags given on the command line override them.
pub fn expand_config(args: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut path = None;
    for (i, a) in args.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            path = args.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            path = Some(PathBuf::from(p));
        }
    }
    let Some(path) = path else {
        return Ok(args);
    };
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let tokens = config_tokens(&text)?;
    let at = args.len().min(2);
    let mut out = args[..at].to_vec();
    out.extend(tokens);
    out.extend_from_slice(&args[at..]);
    Ok(out)
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Langevin(a) => cmd_langevin(a),
        Command::Theory(a) => cmd_theory(a),
        Command::SigmaSearch(a) => cmd_sigma_search(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invariant(_) => 3,
        _ => 2,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString>,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let args = match expand_config(args) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
