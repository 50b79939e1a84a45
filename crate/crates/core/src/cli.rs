//! The `flowlab` command line: one subcommand per experiment, a JSON run
//! config whose values are overridden by explicit flags, and a resolved copy
//! of the config (`config.json`) written next to every run's outputs.
//!
//! Exit codes: 0 success, 2 usage, 3 format, 4 numeric, 5 singularity, 1 other.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::datasets::{gen_gaussian_mixture, gen_two_moons, TrainingSet};
use crate::diagnostics::{
    self, collapse_vs_dim, cosine_collapse, nn_distances, CollapseBase, CollapseOptions, MmdVariant,
};
use crate::efm_estimator::verify_instance;
use crate::error::Error;
use crate::exact_field::DEFAULT_T_EPS;
use crate::neural_velocity::{
    approx_error_curve, train, Activation, Checkpoint, NetConfig, Objective, TimeEmbedding, TrainConfig, VelocityNet,
};
use crate::numeric::fmt_sig;
use crate::sampler::{self, FieldSource, Method};

pub const EXIT_OTHER: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FORMAT: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_SINGULARITY: i32 = 5;

/// A failed command: the exit code and the message printed to stderr.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match e.root() {
            Error::InvalidArgument(_) => EXIT_USAGE,
            Error::Format { .. } => EXIT_FORMAT,
            Error::Numeric(_) | Error::Training { .. } | Error::Blowup { .. } | Error::TooLarge { .. } => EXIT_NUMERIC,
            Error::Singularity { .. } => EXIT_SINGULARITY,
            Error::Io(_) | Error::AtIndex { .. } => EXIT_OTHER,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "flowlab",
    version,
    about = "Flow-matching laboratory: exact fields, EFM, samplers and diagnostics"
)]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Request scheduling-independent outputs (always the case; recorded in the config).
    #[arg(long, global = true, num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Worker threads for data-parallel work (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory (default: `out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// JSON run config; explicit flags take precedence over its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a dataset file.
    GenData(GenDataArgs),
    /// Train a velocity network.
    Train(TrainArgs),
    /// Integrate the ODE from Gaussian noise under the exact or learned field.
    Sample(SampleArgs),
    /// Sweep the exact-to-learned switch time over a shared noise batch.
    Hybrid(HybridArgs),
    /// Cosine alignment between the exact field and the conditional direction.
    Collapse(CollapseArgs),
    /// Nearest-neighbor distances from samples to a training set.
    NnDist(NnDistArgs),
    /// Gaussian-kernel MMD between two sample files (not FID).
    Mmd(MmdArgs),
    /// Check the EFM estimator against exhaustive enumeration.
    VerifyEfm(VerifyEfmArgs),
    /// Error between a trained network and the exact field over time.
    ApproxError(ApproxErrorArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Hybrid(_) => "hybrid",
            Command::Collapse(_) => "collapse",
            Command::NnDist(_) => "nn-dist",
            Command::Mmd(_) => "mmd",
            Command::VerifyEfm(_) => "verify-efm",
            Command::ApproxError(_) => "approx-error",
        }
    }
}

/// The JSON run config. `args` holds the subcommand's options under the same
/// names as its flags (with `_` for `-`).
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub deterministic: Option<bool>,
    #[serde(default)]
    pub threads: Option<usize>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub args: serde_json::Value,
}

/// Field-wise `self.or(base)` for option-only argument records.
macro_rules! overlay {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl $name {
            fn overlay(self, base: Self) -> Self {
                $name { $($field: self.$field.or(base.$field)),* }
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum DataKind {
    TwoMoons,
    Mixture,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct GenDataArgs {
    /// Dataset family.
    #[arg(value_enum)]
    kind: Option<DataKind>,
    /// Number of points.
    #[arg(long)]
    n: Option<usize>,
    /// Ambient dimension (mixture only; default 2).
    #[arg(long)]
    dim: Option<usize>,
    /// Mixture components (default 8).
    #[arg(long)]
    k: Option<usize>,
    /// Half-width of the cube holding the mixture means (default 5).
    #[arg(long)]
    spread: Option<f64>,
    /// Two-moons noise standard deviation (default 0.05).
    #[arg(long)]
    noise: Option<f64>,
    /// Standardize coordinates to zero mean and unit variance.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    standardize: Option<bool>,
}
overlay!(GenDataArgs {
    kind,
    n,
    dim,
    k,
    spread,
    noise,
    standardize
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ObjectiveArg {
    Cfm,
    Efm,
    Otcfm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum ActivationArg {
    Silu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum EmbeddingArg {
    Scalar,
    Sinusoidal,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainArgs {
    /// Training set (FMDS file).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// EFM batch size M (required with `--objective efm`).
    #[arg(long = "M")]
    #[serde(rename = "M")]
    m: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    ema_decay: Option<f64>,
    #[arg(long)]
    t_eps: Option<f64>,
    /// Record the loss every this many steps.
    #[arg(long)]
    log_every: Option<usize>,
    /// Hidden widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long, value_enum)]
    activation: Option<ActivationArg>,
    #[arg(long, value_enum)]
    embedding: Option<EmbeddingArg>,
    /// Sinusoidal embedding frequencies.
    #[arg(long)]
    frequencies: Option<usize>,
}
overlay!(TrainArgs {
    data,
    objective,
    m,
    steps,
    batch_size,
    lr,
    grad_clip,
    ema_decay,
    t_eps,
    log_every,
    hidden,
    activation,
    embedding,
    frequencies
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum FieldArg {
    Exact,
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum MethodArg {
    Euler,
    Midpoint,
    Rk4,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Euler => Method::Euler,
            MethodArg::Midpoint => Method::Midpoint,
            MethodArg::Rk4 => Method::Rk4,
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct SampleArgs {
    /// Training set (needed for the exact field).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Network checkpoint (needed for the learned field).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Velocity field (default: learned when a checkpoint is given, else exact).
    #[arg(long, value_enum)]
    field: Option<FieldArg>,
    /// Use the EMA shadow stored in the checkpoint.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    use_ema: Option<bool>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    t_eps: Option<f64>,
    /// Also write every trajectory to `trajectories.csv`.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    trajectories: Option<bool>,
}
overlay!(SampleArgs {
    data,
    checkpoint,
    field,
    use_ema,
    n_samples,
    steps,
    method,
    t_eps,
    trajectories
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct HybridArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Switch times, comma separated (default 0,0.2,0.4,0.6,0.8,1).
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    use_ema: Option<bool>,
    #[arg(long)]
    n_samples: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    t_eps: Option<f64>,
}
overlay!(HybridArgs {
    data,
    checkpoint,
    taus,
    use_ema,
    n_samples,
    steps,
    method,
    t_eps
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CollapseArgs {
    /// Training set; without it a Gaussian mixture is generated.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Dimensions for a collapse-vs-dimension table, comma separated.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    /// Times, comma separated (default 0,0.1,...,0.9).
    #[arg(long, value_delimiter = ',')]
    t_grid: Option<Vec<f64>>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    t_eps: Option<f64>,
    /// Mixture size (default 1024).
    #[arg(long)]
    n: Option<usize>,
    /// Mixture dimension when `--dims` is absent (default 2).
    #[arg(long)]
    dim: Option<usize>,
    /// Mixture components (default 8).
    #[arg(long)]
    k: Option<usize>,
    /// Mixture mean spread (default 5).
    #[arg(long)]
    spread: Option<f64>,
}
overlay!(CollapseArgs {
    data,
    dims,
    t_grid,
    n_pairs,
    threshold,
    bins,
    t_eps,
    n,
    dim,
    k,
    spread
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct NnDistArgs {
    /// Generated samples (FMDS file).
    #[arg(long)]
    samples: Option<PathBuf>,
    /// Training set (FMDS file).
    #[arg(long)]
    data: Option<PathBuf>,
}
overlay!(NnDistArgs { samples, data });

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum VariantArg {
    Unbiased,
    Biased,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct MmdArgs {
    #[arg(long)]
    a: Option<PathBuf>,
    #[arg(long)]
    b: Option<PathBuf>,
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
}
overlay!(MmdArgs { a, b, variant });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct VerifyEfmArgs {
    /// Training-set size per instance.
    #[arg(long)]
    n: Option<usize>,
    /// Estimator batch size M.
    #[arg(long = "M")]
    #[serde(rename = "M")]
    m: Option<usize>,
    /// Dimension (default 2).
    #[arg(long)]
    d: Option<usize>,
    /// Random instances (default 50).
    #[arg(long)]
    trials: Option<usize>,
}
overlay!(VerifyEfmArgs { n, m, d, trials });

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ApproxErrorArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    t_grid: Option<Vec<f64>>,
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    use_ema: Option<bool>,
    #[arg(long)]
    t_eps: Option<f64>,
}
overlay!(ApproxErrorArgs {
    data,
    checkpoint,
    t_grid,
    n_mc,
    use_ema,
    t_eps
});

/// Settings shared by every command after merging flags and config.
struct Ctx {
    seed: u64,
    out: PathBuf,
}

fn required<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::usage(format!("missing required option {flag}")))
}

fn config_args<T: for<'de> Deserialize<'de> + Default>(cfg: Option<&RunConfig>) -> CliResult<T> {
    match cfg {
        Some(c) if !c.args.is_null() => {
            serde_json::from_value(c.args.clone()).map_err(|e| CliError::usage(format!("config args: {e}")))
        }
        _ => Ok(T::default()),
    }
}

fn csv_file(ctx: &Ctx, name: &str) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(ctx.out.join(name))?))
}

fn load_net(path: &Path, use_ema: bool) -> CliResult<VelocityNet> {
    let ck = Checkpoint::load(path)?;
    if use_ema {
        ck.ema
            .map(|e| e.shadow)
            .ok_or_else(|| CliError::usage(format!("{} has no EMA payload", path.display())))
    } else {
        Ok(ck.net)
    }
}

fn endpoints_set(ends: &Array2<f64>, name: &str) -> CliResult<TrainingSet> {
    Ok(TrainingSet::new(ends.mapv(|v| v as f32), name)?)
}

fn standardized_note(ts: &TrainingSet) -> &'static str {
    if ts.standardized {
        "standardized"
    } else {
        "raw coordinates"
    }
}

/// `k / denom` for `k` in `0..count`.
fn default_grid(count: usize, denom: f64) -> Vec<f64> {
    (0..count).map(|k| k as f64 / denom).collect()
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Usage text and errors go to stdout/stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

fn execute(cli: Cli) -> CliResult<()> {
    let file_cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let cfg: RunConfig =
                serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
            if cfg.command != cli.command.name() {
                return Err(CliError::usage(format!(
                    "config is for `{}`, not `{}`",
                    cfg.command,
                    cli.command.name()
                )));
            }
            Some(cfg)
        }
        None => None,
    };
    let fc = file_cfg.as_ref();
    let seed = cli.seed.or(fc.and_then(|c| c.seed)).unwrap_or(0);
    let deterministic = cli.deterministic.or(fc.and_then(|c| c.deterministic)).unwrap_or(false);
    let threads = cli.threads.or(fc.and_then(|c| c.threads));
    let out = cli
        .out
        .clone()
        .or(fc.and_then(|c| c.output_dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    if let Some(n) = threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be >= 1"));
        }
        // Fails only if a pool was already installed in this process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = Ctx { seed, out };
    let name = cli.command.name().to_string();
    let args = match cli.command {
        Command::GenData(a) => to_value(gen_data(&ctx, prepare(&ctx, a.overlay(config_args(fc)?))?)?),
        Command::Train(a) => to_value(cmd_train(&ctx, prepare(&ctx, a.overlay(config_args(fc)?))?)?),
        Command::Sample(a) => to_value(cmd_sample(&ctx, prepare(&ctx, a.overlay(config_args(fc)?))?)?),
        Command::Hybrid(a) => to_value(cmd_hybrid(&ctx, prepare(&ctx, a.overlay(config_args(fc)?))?)?),
        Command::Collapse(a) => to_value(cmd_collapse(&ctx, prepare(&ctx, a.overlay(config_args(fc)?))?)?),
        Command::NnDist(a) => to_value(cmd_nn_dist(&ctx, prepare(&ctx, a.overlay(config_args(fc)?))?)?),
        Command::Mmd(a) => to_value(cmd_mmd(&ctx, prepare(&ctx, a.overlay(config_args(fc)?))?)?),
        Command::VerifyEfm(a) => to_value(cmd_verify_efm(&ctx, prepare(&ctx, a.overlay(config_args(fc)?))?)?),
        Command::ApproxError(a) => to_value(cmd_approx_error(&ctx, prepare(&ctx, a.overlay(config_args(fc)?))?)?),
    };
    let resolved = RunConfig {
        command: name,
        seed: Some(seed),
        deterministic: Some(deterministic),
        threads,
        output_dir: Some(ctx.out.clone()),
        args,
    };
    let text = serde_json::to_string_pretty(&resolved).expect("config serializes");
    fs::write(ctx.out.join("config.json"), text + "\n")?;
    Ok(())
}

/// Creates the output directory once the arguments have been resolved, so
/// rejected invocations leave nothing behind.
fn prepare<T>(ctx: &Ctx, args: T) -> CliResult<T> {
    fs::create_dir_all(&ctx.out)?;
    Ok(args)
}

fn to_value<T: Serialize>(v: T) -> serde_json::Value {
    serde_json::to_value(v).expect("arguments serialize")
}

fn gen_data(ctx: &Ctx, mut a: GenDataArgs) -> CliResult<GenDataArgs> {
    let kind = required(a.kind, "<KIND>")?;
    let n = required(a.n, "--n")?;
    let standardize = *a.standardize.get_or_insert(false);
    let ts = match kind {
        DataKind::TwoMoons => gen_two_moons(n, *a.noise.get_or_insert(0.05), ctx.seed)?,
        DataKind::Mixture => gen_gaussian_mixture(
            n,
            *a.dim.get_or_insert(2),
            *a.k.get_or_insert(8),
            *a.spread.get_or_insert(5.0),
            ctx.seed,
        )?,
    };
    let ts = if standardize { ts.standardize() } else { ts };
    let path = ctx.out.join("dataset.fmds");
    ts.save(&path)?;
    println!(
        "n={} d={} path={} ({})",
        ts.n(),
        ts.dim(),
        path.display(),
        standardized_note(&ts)
    );
    Ok(a)
}

fn cmd_train(ctx: &Ctx, mut a: TrainArgs) -> CliResult<TrainArgs> {
    let data = required(a.data.clone(), "--data")?;
    let ts = TrainingSet::load(&data)?;
    let defaults = TrainConfig::default();
    let objective = match *a.objective.get_or_insert(ObjectiveArg::Cfm) {
        ObjectiveArg::Cfm => Objective::Cfm,
        ObjectiveArg::Otcfm => Objective::Otcfm,
        ObjectiveArg::Efm => Objective::Efm {
            m: required(a.m, "--M (with --objective efm)")?,
        },
    };
    let embedding = match *a.embedding.get_or_insert(EmbeddingArg::Sinusoidal) {
        EmbeddingArg::Scalar => TimeEmbedding::Scalar,
        EmbeddingArg::Sinusoidal => TimeEmbedding::Sinusoidal {
            frequencies: *a.frequencies.get_or_insert(16),
        },
    };
    let cfg = TrainConfig {
        objective,
        batch_size: *a.batch_size.get_or_insert(defaults.batch_size),
        lr: *a.lr.get_or_insert(defaults.lr),
        steps: *a.steps.get_or_insert(defaults.steps),
        grad_clip: *a.grad_clip.get_or_insert(defaults.grad_clip),
        ema_decay: *a.ema_decay.get_or_insert(defaults.ema_decay),
        seed: ctx.seed,
        t_eps: *a.t_eps.get_or_insert(defaults.t_eps),
        log_every: *a.log_every.get_or_insert(defaults.log_every),
        net: NetConfig {
            hidden: a.hidden.get_or_insert_with(|| defaults.net.hidden.clone()).clone(),
            activation: match *a.activation.get_or_insert(ActivationArg::Silu) {
                ActivationArg::Silu => Activation::Silu,
                ActivationArg::Relu => Activation::Relu,
            },
            embedding,
        },
    };
    let outcome = train(&ts, &cfg)?;
    Checkpoint::from(&outcome).save(ctx.out.join("checkpoint.fmnn"))?;
    let mut w = csv_file(ctx, "loss.csv")?;
    writeln!(w, "step,loss")?;
    for r in &outcome.trace {
        writeln!(w, "{},{}", r.step, fmt_sig(r.loss))?;
    }
    w.flush()?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "trained {} steps; loss at step {} = {}",
            cfg.steps,
            last.step,
            fmt_sig(last.loss)
        );
    } else {
        println!("trained {} steps", cfg.steps);
    }
    Ok(a)
}

fn cmd_sample(ctx: &Ctx, mut a: SampleArgs) -> CliResult<SampleArgs> {
    let default_field = if a.checkpoint.is_some() {
        FieldArg::Learned
    } else {
        FieldArg::Exact
    };
    let field_kind = *a.field.get_or_insert(default_field);
    let use_ema = *a.use_ema.get_or_insert(false);
    let n_samples = *a.n_samples.get_or_insert(256);
    let steps = *a.steps.get_or_insert(sampler::DEFAULT_STEPS);
    let method: Method = (*a.method.get_or_insert(MethodArg::Euler)).into();
    let t_eps = *a.t_eps.get_or_insert(DEFAULT_T_EPS);
    let trajectories = *a.trajectories.get_or_insert(false);
    let (ts, net);
    let field = match field_kind {
        FieldArg::Exact => {
            ts = TrainingSet::load(required(a.data.as_ref(), "--data (for the exact field)")?)?;
            FieldSource::Exact(&ts)
        }
        FieldArg::Learned => {
            net = load_net(required(a.checkpoint.as_ref(), "--checkpoint")?, use_ema)?;
            FieldSource::Learned(&net)
        }
    };
    let ends = if trajectories {
        let recs = sampler::sample_trajectories(n_samples, &field, steps, method, ctx.seed, t_eps)?;
        let mut w = csv_file(ctx, "trajectories.csv")?;
        sampler::write_trajectories_csv(&recs, &mut w)?;
        w.flush()?;
        let d = field.dim();
        let flat: Vec<f64> = recs.iter().flat_map(|r| r.endpoint.iter().copied()).collect();
        Array2::from_shape_vec((recs.len(), d), flat).expect("endpoint rows have the field dimension")
    } else {
        sampler::sample_batch(n_samples, &field, steps, method, ctx.seed, t_eps)?
    };
    let path = ctx.out.join("samples.fmds");
    endpoints_set(&ends, "samples")?.save(&path)?;
    println!("wrote {n_samples} samples to {}", path.display());
    Ok(a)
}

fn tau_label(tau: f64) -> String {
    format!("{tau}")
}

fn cmd_hybrid(ctx: &Ctx, mut a: HybridArgs) -> CliResult<HybridArgs> {
    let ts = TrainingSet::load(required(a.data.as_ref(), "--data")?)?;
    let use_ema = *a.use_ema.get_or_insert(false);
    let net = load_net(required(a.checkpoint.as_ref(), "--checkpoint")?, use_ema)?;
    let taus = a.taus.get_or_insert_with(|| default_grid(6, 5.0)).clone();
    let n_samples = *a.n_samples.get_or_insert(256);
    let steps = *a.steps.get_or_insert(sampler::DEFAULT_STEPS);
    let method: Method = (*a.method.get_or_insert(MethodArg::Euler)).into();
    let t_eps = *a.t_eps.get_or_insert(DEFAULT_T_EPS);
    let sweep = sampler::hybrid_sweep(&taus, &ts, &net, n_samples, steps, method, ctx.seed, t_eps)?;
    let mut w = csv_file(ctx, "hybrid_nn.csv")?;
    writeln!(w, "tau,switch_step,mean_nn_distance,reference")?;
    for (tau, ends) in taus.iter().zip(&sweep) {
        endpoints_set(ends, "hybrid")?.save(ctx.out.join(format!("hybrid_tau_{}.fmds", tau_label(*tau))))?;
        let report = nn_distances(ends, &ts)?;
        let switch = (tau * steps as f64).round() as usize;
        let reference = report.reference.map_or_else(|| "nan".to_string(), fmt_sig);
        writeln!(w, "{},{switch},{},{reference}", fmt_sig(*tau), fmt_sig(report.mean))?;
        println!(
            "tau={tau}: mean NN distance {} ({})",
            fmt_sig(report.mean),
            standardized_note(&ts)
        );
    }
    w.flush()?;
    Ok(a)
}

fn cmd_collapse(ctx: &Ctx, mut a: CollapseArgs) -> CliResult<CollapseArgs> {
    let grid = a.t_grid.get_or_insert_with(|| default_grid(10, 10.0)).clone();
    let n_pairs = *a.n_pairs.get_or_insert(1000);
    let opts = CollapseOptions {
        threshold: *a.threshold.get_or_insert(diagnostics::DEFAULT_THRESHOLD),
        bins: *a.bins.get_or_insert(diagnostics::DEFAULT_BINS),
        t_eps: *a.t_eps.get_or_insert(DEFAULT_T_EPS),
    };
    let data = match &a.data {
        Some(p) => Some(TrainingSet::load(p)?),
        None => None,
    };
    if data.is_none() {
        a.n.get_or_insert(1024);
        a.k.get_or_insert(8);
        a.spread.get_or_insert(5.0);
    }
    if let Some(dims) = a.dims.clone() {
        let base = match &data {
            Some(ts) => CollapseBase::Dataset(ts),
            None => CollapseBase::Mixture {
                n: a.n.unwrap_or(1024),
                k: a.k.unwrap_or(8),
                spread: a.spread.unwrap_or(5.0),
            },
        };
        let curves = collapse_vs_dim(base, &dims, &grid, n_pairs, ctx.seed, &opts)?;
        let mut w = csv_file(ctx, "collapse_vs_dim.csv")?;
        diagnostics::write_collapse_vs_dim_csv(&curves, &grid, &mut w)?;
        w.flush()?;
        for c in &curves {
            println!("dim={}: fractions {:?}", c.dim, c.fractions);
        }
    } else {
        let generated;
        let ts = match &data {
            Some(ts) => ts,
            None => {
                let dim = *a.dim.get_or_insert(2);
                generated = gen_gaussian_mixture(
                    a.n.unwrap_or(1024),
                    dim,
                    a.k.unwrap_or(8),
                    a.spread.unwrap_or(5.0),
                    ctx.seed,
                )?;
                &generated
            }
        };
        let report = cosine_collapse(ts, &grid, n_pairs, ctx.seed, &opts)?;
        let mut w = csv_file(ctx, "collapse.csv")?;
        diagnostics::write_collapse_csv(&report, &mut w)?;
        w.flush()?;
        println!(
            "fractions above {}: {:?} ({})",
            opts.threshold,
            report.fractions,
            standardized_note(ts)
        );
    }
    Ok(a)
}

fn cmd_nn_dist(ctx: &Ctx, a: NnDistArgs) -> CliResult<NnDistArgs> {
    let samples = TrainingSet::load(required(a.samples.as_ref(), "--samples")?)?;
    let ts = TrainingSet::load(required(a.data.as_ref(), "--data")?)?;
    let report = nn_distances(&samples.to_f64(), &ts)?;
    let mut w = csv_file(ctx, "nn_dist.csv")?;
    diagnostics::write_nn_csv(&report, &mut w)?;
    w.flush()?;
    let reference = report.reference.map_or_else(|| "n/a".to_string(), fmt_sig);
    println!(
        "mean NN distance {} (train-to-train reference {reference}; {})",
        fmt_sig(report.mean),
        standardized_note(&ts)
    );
    Ok(a)
}

fn cmd_mmd(ctx: &Ctx, mut a: MmdArgs) -> CliResult<MmdArgs> {
    let pa = required(a.a.clone(), "--a")?;
    let pb = required(a.b.clone(), "--b")?;
    let variant = match *a.variant.get_or_insert(VariantArg::Unbiased) {
        VariantArg::Unbiased => MmdVariant::Unbiased,
        VariantArg::Biased => MmdVariant::Biased,
    };
    let sa = TrainingSet::load(&pa)?;
    let sb = TrainingSet::load(&pb)?;
    let report = diagnostics::mmd(&sa.to_f64(), &sb.to_f64(), variant)?;
    let mut w = csv_file(ctx, "mmd.csv")?;
    diagnostics::write_mmd_csv(&sa.name, &sb.name, &report, &mut w)?;
    w.flush()?;
    println!(
        "MMD (Gaussian kernel ladder; not FID) = {} ({} vs {})",
        fmt_sig(report.total),
        standardized_note(&sa),
        standardized_note(&sb)
    );
    Ok(a)
}

fn cmd_verify_efm(ctx: &Ctx, mut a: VerifyEfmArgs) -> CliResult<VerifyEfmArgs> {
    let n = required(a.n, "--n")?;
    let m = required(a.m, "--M")?;
    let d = *a.d.get_or_insert(2);
    let trials = *a.trials.get_or_insert(50);
    let mut w = csv_file(ctx, "verify_efm.csv")?;
    writeln!(w, "trial,n,M,d,t,unbiasedness_error,var_m,var_cond")?;
    let mut worst = 0.0f64;
    let mut variance_ok = true;
    for trial in 0..trials {
        let r = verify_instance(n, m, d, ctx.seed, trial as u64)?;
        worst = worst.max(r.unbiasedness_error);
        variance_ok &= r.variance_ok(1e-12);
        writeln!(
            w,
            "{trial},{n},{m},{d},{},{},{},{}",
            fmt_sig(r.t),
            fmt_sig(r.unbiasedness_error),
            fmt_sig(r.var_m),
            fmt_sig(r.var_cond)
        )?;
    }
    w.flush()?;
    println!("max unbiasedness error {} over {trials} trials", fmt_sig(worst));
    println!("variance never above conditional variance: {variance_ok}");
    if worst <= 1e-10 && variance_ok {
        Ok(a)
    } else {
        Err(CliError {
            code: EXIT_NUMERIC,
            message: "estimator check failed".into(),
        })
    }
}

fn cmd_approx_error(ctx: &Ctx, mut a: ApproxErrorArgs) -> CliResult<ApproxErrorArgs> {
    let ts = TrainingSet::load(required(a.data.as_ref(), "--data")?)?;
    let use_ema = *a.use_ema.get_or_insert(false);
    let net = load_net(required(a.checkpoint.as_ref(), "--checkpoint")?, use_ema)?;
    let grid = a.t_grid.get_or_insert_with(|| default_grid(10, 10.0)).clone();
    let n_mc = *a.n_mc.get_or_insert(256);
    let t_eps = *a.t_eps.get_or_insert(DEFAULT_T_EPS);
    let curve = approx_error_curve(&net, &ts, &grid, n_mc, ctx.seed, t_eps)?;
    let mut w = csv_file(ctx, "approx_error.csv")?;
    diagnostics::write_approx_error_csv(&curve, &mut w)?;
    w.flush()?;
    println!(
        "time-averaged error {} ({})",
        fmt_sig(diagnostics::time_averaged_error(&curve)),
        standardized_note(&ts)
    );
    Ok(a)
}
