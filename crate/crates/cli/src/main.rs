//! `koofu`: fit, apply and evaluate discriminant whitening transforms on
//! embedding files.

mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "koofu",
    version,
    about = "Discriminant whitening for embedding spaces"
)]
struct Cli {
    /// Worker threads for scatter accumulation, projection and search
    /// (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Accumulate scatter statistics and fit a transform.
    Fit(FitArgs),
    /// Project embeddings with a fitted transform.
    Apply(ApplyArgs),
    /// Build a visual or textual prototype bank.
    Prototypes(PrototypesArgs),
    /// Rank classes for query embeddings.
    Classify(ClassifyArgs),
    /// Run one evaluation and report accuracy and search cost.
    Eval(EvalArgs),
    /// Evaluate over a range of λ, output dimensions or k.
    Sweep(SweepArgs),
    /// Write a seeded synthetic Gaussian benchmark.
    Synth(SynthArgs),
    /// Check the invariants of serialized artifacts.
    Verify(VerifyArgs),
}

/// An `EMBEDDINGS,LABELS` pair of file paths.
#[derive(Debug, Clone)]
pub struct Pair {
    pub embeddings: PathBuf,
    pub labels: PathBuf,
}

fn parse_pair(s: &str) -> Result<Pair, String> {
    match s.split_once(',') {
        Some((e, l)) if !e.is_empty() && !l.is_empty() => Ok(Pair {
            embeddings: e.into(),
            labels: l.into(),
        }),
        _ => Err(format!("expected EMBEDDINGS,LABELS, got {s:?}")),
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Cosine,
    Euclidean,
}

impl From<MetricArg> for koofu_core::Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Cosine => koofu_core::Metric::Cosine,
            MetricArg::Euclidean => koofu_core::Metric::Euclidean,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum WeightingArg {
    /// Weight class-mean deviations by class size.
    Count,
    /// Give every class the same weight.
    Uniform,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModeArg {
    MeanThenNormalize,
    NormalizeThenMean,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ClassifierArg {
    Nvp,
    Knn,
    TextNvp,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AxisArg {
    Lambda,
    OutDim,
    K,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Training shard as EMBEDDINGS,LABELS; repeat for more shards.
    #[arg(long = "shard", value_name = "EMB,LABELS", value_parser = parse_pair)]
    pub shards: Vec<Pair>,
    /// Previously saved statistics to merge in; repeatable.
    #[arg(long = "stats", value_name = "FILE")]
    pub stats: Vec<PathBuf>,
    /// Class table (TSV `id<TAB>name`) fixing the number of classes.
    #[arg(long, value_name = "FILE")]
    pub classes: Option<PathBuf>,
    /// Shrinkage λ added to the within-class scatter.
    #[arg(long)]
    pub lambda: f64,
    /// Retained dimensions (default: all).
    #[arg(long, value_name = "L")]
    pub out_dim: Option<usize>,
    #[arg(long, value_enum, default_value = "count")]
    pub weighting: WeightingArg,
    /// Output transform file.
    #[arg(short, long, value_name = "FILE")]
    pub output: PathBuf,
    /// Also write the merged statistics.
    #[arg(long, value_name = "FILE")]
    pub save_stats: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ApplyArgs {
    #[arg(long, value_name = "FILE")]
    pub transform: PathBuf,
    /// Embeddings to project.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    #[arg(short, long, value_name = "FILE")]
    pub output: PathBuf,
    /// Rescale projected rows to unit norm.
    #[arg(long)]
    pub renormalize: bool,
}

#[derive(Debug, Args)]
pub struct PrototypesArgs {
    /// Labeled visual embeddings; prototypes are class means.
    #[arg(long, value_name = "EMB,LABELS", value_parser = parse_pair, conflicts_with = "text", required_unless_present = "text")]
    pub visual: Option<Pair>,
    /// Text embeddings with the class of each row; averaged per class.
    #[arg(long, value_name = "EMB,LABELS", value_parser = parse_pair)]
    pub text: Option<Pair>,
    #[arg(long, value_name = "FILE")]
    pub classes: Option<PathBuf>,
    /// Build the bank in the projected space of this transform.
    #[arg(long, value_name = "FILE")]
    pub transform: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "cosine")]
    pub metric: MetricArg,
    #[arg(long, value_enum, default_value = "mean-then-normalize")]
    pub mode: ModeArg,
    /// Keep only the class ids listed in this file.
    #[arg(long, value_name = "FILE")]
    pub class_set: Option<PathBuf>,
    /// Output prefix; writes PREFIX.kfeb, PREFIX.kflb and PREFIX.json.
    #[arg(short, long, value_name = "PREFIX")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct ClassifyArgs {
    #[arg(long, value_name = "FILE")]
    pub queries: PathBuf,
    /// Prototype bank prefix (nearest-prototype classification).
    #[arg(
        long,
        value_name = "PREFIX",
        conflicts_with = "index",
        required_unless_present = "index"
    )]
    pub bank: Option<PathBuf>,
    /// Reference set as EMBEDDINGS,LABELS (k-NN classification).
    #[arg(long, value_name = "EMB,LABELS", value_parser = parse_pair)]
    pub index: Option<Pair>,
    /// Transform applied to the queries (and to the k-NN reference set).
    #[arg(long, value_name = "FILE")]
    pub transform: Option<PathBuf>,
    /// Ranked class ids per query for prototype banks.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    /// Neighbors per vote for k-NN.
    #[arg(long, default_value_t = 15)]
    pub k: usize,
    /// Metric of the k-NN reference set.
    #[arg(long, value_enum, default_value = "cosine")]
    pub metric: MetricArg,
    #[arg(long, value_name = "FILE")]
    pub class_set: Option<PathBuf>,
    /// TSV output (default: stdout).
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Labeled reference data: prototype means and k-NN index.
    #[arg(long, value_name = "EMB,LABELS", value_parser = parse_pair)]
    pub train: Pair,
    /// Labeled evaluation queries.
    #[arg(long, value_name = "EMB,LABELS", value_parser = parse_pair)]
    pub queries: Pair,
    #[arg(long, value_name = "FILE")]
    pub classes: Option<PathBuf>,
    /// Multi-label ground truth (NDJSON) for ReaL accuracy.
    #[arg(long, value_name = "FILE")]
    pub real: Option<PathBuf>,
    /// Text embeddings with their class labels, for `text-nvp`.
    #[arg(long, value_name = "EMB,LABELS", value_parser = parse_pair)]
    pub text: Option<Pair>,
    #[arg(long, value_enum, default_value = "nvp")]
    pub classifier: ClassifierArg,
    #[arg(long, value_enum, default_value = "cosine")]
    pub metric: MetricArg,
    /// Neighbors per vote for k-NN.
    #[arg(long, default_value_t = 15)]
    pub k: usize,
    /// Ranking width for prototype classifiers.
    #[arg(long, default_value_t = 5)]
    pub top_k: usize,
    #[arg(long, value_enum, default_value = "mean-then-normalize")]
    pub mode: ModeArg,
    /// Restrict (or extend with distractors) the candidate classes.
    #[arg(long, value_name = "FILE")]
    pub class_set: Option<PathBuf>,
    /// Search repetitions for the timing median.
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    pub repeats: u64,
    /// Print NDJSON instead of the aligned table.
    #[arg(long)]
    pub json: bool,
    /// Also write the reports as NDJSON.
    #[arg(short, long, value_name = "FILE")]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fitted transform; omit both this and --lambda for the raw space.
    #[arg(long, value_name = "FILE", conflicts_with = "lambda")]
    pub transform: Option<PathBuf>,
    /// Fit a transform on the training data with this λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_name = "L")]
    pub out_dim: Option<usize>,
    #[arg(long, value_enum, default_value = "count")]
    pub weighting: WeightingArg,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum)]
    pub axis: AxisArg,
    /// Comma-separated values of the swept parameter.
    #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
    pub values: Vec<f64>,
    /// λ for out-dim and k sweeps (a k sweep without it runs in the raw space).
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, value_name = "L")]
    pub out_dim: Option<usize>,
    #[arg(long, value_enum, default_value = "count")]
    pub weighting: WeightingArg,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    pub classes: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 200)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    /// Condition number κ of the shared within-class covariance.
    #[arg(long, default_value_t = 100.0)]
    pub condition: f64,
    /// Standard deviation of the class-mean draw.
    #[arg(long, default_value_t = 0.16)]
    pub separation: f64,
    /// Norm of the offset shared by all class means.
    #[arg(long, default_value_t = 1.0)]
    pub offset: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(short, long, value_name = "DIR")]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Artifact files, or bank prefixes (PREFIX.json next to PREFIX.kfeb).
    #[arg(required = true, value_name = "PATH")]
    pub paths: Vec<PathBuf>,
}

fn configure_threads(threads: Option<usize>) -> Result<(), CliError> {
    let Some(n) = threads else { return Ok(()) };
    if n == 0 {
        return Err(CliError::validation("--threads must be positive"));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::validation(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    if n > 1 {
        log::warn!("built without the parallel feature; --threads {n} ignored");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Fit(a) => commands::fit(a),
        Command::Apply(a) => commands::apply(a),
        Command::Prototypes(a) => commands::prototypes(a),
        Command::Classify(a) => commands::classify(a),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a),
        Command::Synth(a) => commands::synth(a),
        Command::Verify(a) => commands::verify(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
