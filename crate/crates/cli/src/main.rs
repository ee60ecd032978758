//! `otf`: generate corpora, compress repositories, train and evaluate
//! linear rankers, and serve live retrieval sessions over HTTP.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use tracing_subscriber::EnvFilter;

const DEFAULT_SEED: &str = "42";

#[derive(Debug, Parser)]
#[command(name = "otf", version, about)]
#[command(after_help = "Settings may also come from a TOML file given with --config <path> \
    before the subcommand. Top-level keys fill any matching flag; keys under \
    [<subcommand>] apply to that subcommand only. Command-line flags win. \
    OTF_SEED sets the default seed of every command.")]
struct Cli {
    /// TOML file of default flag values.
    #[arg(long, value_name = "PATH", global = false)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled Gaussian-cluster corpus split into a repository,
    /// a negative pool and per-class training positives.
    GenSynth(GenSynth),
    /// Learn a product-quantization codebook.
    LearnPq(LearnPq),
    /// Encode a feature file with a PQ codebook.
    Encode(Encode),
    /// Binarize a feature file with a random tight frame.
    Binarize(Binarize),
    /// Train a hinge-loss SVM on fixed positive and negative sets.
    TrainBatch(TrainBatch),
    /// Per-class precision@K of trained models over a repository.
    Evaluate(Evaluate),
    /// Simulated-clock precision traces of live sessions.
    Convergence(Convergence),
    /// Serve the HTTP/JSON session API.
    Serve(Serve),
    /// Time scoring plus top-K selection over a repository.
    BenchRank(BenchRank),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct GenSynth {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    /// Positives generated per class, training and test together.
    #[arg(long, default_value_t = 260)]
    per_class: usize,
    /// Unlabeled vectors; the negative pool is drawn from these.
    #[arg(long, default_value_t = 116_000)]
    distractors: usize,
    /// Standard deviation of positives around their class centre.
    #[arg(long, default_value_t = 1.5)]
    cluster_spread: f64,
    /// Standard deviation of class centres and distractors.
    #[arg(long, default_value_t = 1.0)]
    center_spread: f64,
    /// Positives per class written to the training corpus.
    #[arg(long, default_value_t = 60)]
    train_per_class: usize,
    /// Distractors moved into the negative pool.
    #[arg(long, default_value_t = 16_000)]
    negatives: usize,
    #[arg(long, env = "OTF_SEED", default_value = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct LearnPq {
    /// Training feature file.
    #[arg(long)]
    train: PathBuf,
    /// Dimensions per sub-quantizer.
    #[arg(long, default_value_t = 4)]
    subdim: usize,
    /// Centroids per sub-quantizer (at most 256).
    #[arg(long, default_value_t = 256)]
    centroids: usize,
    /// Lloyd iterations.
    #[arg(long, default_value_t = 25)]
    iterations: usize,
    /// Use at most this many leading training rows (0 = all).
    #[arg(long, default_value_t = 10_000)]
    max_train: usize,
    /// Codebook output (OTFQ).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "OTF_SEED", default_value = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    ingest: Ingest,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct Encode {
    #[arg(long)]
    codebook: PathBuf,
    /// Feature file to encode.
    #[arg(long)]
    input: PathBuf,
    /// Code output (OTFC).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    ingest: Ingest,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct Binarize {
    /// Feature file to binarize.
    #[arg(long)]
    input: PathBuf,
    /// Code length n (at least the feature dimension).
    #[arg(long, default_value_t = 1024)]
    bits: usize,
    /// File whose mean is the centering vector; defaults to the input.
    #[arg(long)]
    center_from: Option<PathBuf>,
    /// Frame output (OTFB); the centering vector goes next to it as `.center`.
    #[arg(long)]
    frame_out: PathBuf,
    /// Code output (OTFH).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "OTF_SEED", default_value = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    ingest: Ingest,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct TrainBatch {
    #[arg(long)]
    positives: PathBuf,
    #[arg(long)]
    negatives: PathBuf,
    #[command(flatten)]
    batch: BatchArgs,
    /// Model output (OTFM).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    ingest: Ingest,
}

#[derive(Debug, Args)]
struct BatchArgs {
    /// SVM cost; the regularizer is 1 / (C n).
    #[arg(long = "c", default_value_t = 0.25)]
    c: f64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    /// Fit without the regularized intercept.
    #[arg(long)]
    no_intercept: bool,
    #[arg(long, env = "OTF_SEED", default_value = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Debug, Args)]
struct Ingest {
    /// Keep vectors as stored instead of L2-normalizing them at load.
    #[arg(long)]
    raw: bool,
}

#[derive(Debug, Args)]
struct RepoArgs {
    /// Repository feature file (OTFR); its `.ids` sidecar supplies names.
    #[arg(long)]
    repo: PathBuf,
    /// Rank PQ codes built with this codebook instead of dense vectors.
    #[arg(long, conflicts_with = "frame")]
    codebook: Option<PathBuf>,
    /// Precomputed PQ codes of the repository; encoded at startup if absent.
    #[arg(long, requires = "codebook")]
    codes: Option<PathBuf>,
    /// Rank binary codes from this frame file instead of dense vectors.
    #[arg(long)]
    frame: Option<PathBuf>,
    /// Precomputed binary codes of the repository; computed if absent.
    #[arg(long, requires = "frame")]
    binary_codes: Option<PathBuf>,
    #[command(flatten)]
    ingest: Ingest,
}

#[derive(Debug, Args)]
struct SessionArgs {
    /// Positives fed per second.
    #[arg(long, default_value_t = 12.0)]
    rate: f64,
    /// Re-rank period in seconds.
    #[arg(long, default_value_t = 0.18)]
    tau: f64,
    /// Length of published ranked lists.
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Pegasos regularization constant.
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Mini-batch size, half positives and half negatives.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Trainer step budget per second.
    #[arg(long, default_value_t = 100.0)]
    steps_per_second: f64,
    /// Publish the running average of iterates.
    #[arg(long)]
    average: bool,
    #[arg(long, env = "OTF_SEED", default_value = DEFAULT_SEED)]
    seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct Evaluate {
    #[command(flatten)]
    repo: RepoArgs,
    /// Ground truth over repository ids; defaults to the repository's `.labels`.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Negative pool feature file.
    #[arg(long)]
    negatives: PathBuf,
    /// Directory of per-class training files (`<class>.otfr` or `<class>/`).
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[command(flatten)]
    batch: BatchArgs,
    /// Train each class by streaming its positives through a simulated
    /// session for this many seconds instead of batch training.
    #[arg(long, value_name = "SECONDS")]
    online: Option<f64>,
    /// Session settings used with --online.
    #[arg(long, default_value_t = 12.0)]
    rate: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// File of repository ids (one per line) to leave out of every ranking.
    #[arg(long)]
    exclude: Option<PathBuf>,
    /// Print JSON instead of TSV.
    #[arg(long)]
    json: bool,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct Convergence {
    #[command(flatten)]
    repo: RepoArgs,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    negatives: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Classes to trace (repeatable); all labeled classes when omitted.
    #[arg(long = "class")]
    classes: Vec<String>,
    /// Simulated seconds per trace.
    #[arg(long, default_value_t = 10.0)]
    duration: f64,
    #[command(flatten)]
    session: SessionArgs,
    /// Write one `<class>.tsv` trace per class into this directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct Serve {
    #[command(flatten)]
    repo: RepoArgs,
    #[arg(long)]
    negatives: PathBuf,
    /// Directory of per-class positive files queried by class name.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[command(flatten)]
    session: SessionArgs,
    #[arg(long, default_value_t = 8)]
    max_sessions: usize,
    /// Seconds a finished session stays readable.
    #[arg(long, default_value_t = 600)]
    ttl_secs: u64,
    /// Run sessions on a simulated clock at this multiple of real time.
    #[arg(long)]
    simulated_speed: Option<f64>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
struct BenchRank {
    /// Repository file; a random unit-norm repository is generated when absent.
    #[arg(long)]
    repo: Option<PathBuf>,
    /// Vectors in the generated repository.
    #[arg(long, default_value_t = 1_000_000)]
    count: usize,
    #[arg(long, default_value_t = 128)]
    dim: usize,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    /// Also time PQ codes with this many dimensions per sub-quantizer.
    #[arg(long)]
    pq_subdim: Option<usize>,
    /// Also time binary codes of this length.
    #[arg(long)]
    bits: Option<usize>,
    #[arg(long, env = "OTF_SEED", default_value = DEFAULT_SEED)]
    seed: u64,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> anyhow::Result<()> {
    let cmd = Cli::command();
    let args = config::expand_args(&cmd, std::env::args_os().collect())?;
    let cli = Cli::from_arg_matches(&cmd.get_matches_from(args))?;
    match cli.command {
        Command::GenSynth(a) => commands::gen_synth(a),
        Command::LearnPq(a) => commands::learn_pq(a),
        Command::Encode(a) => commands::encode(a),
        Command::Binarize(a) => commands::binarize(a),
        Command::TrainBatch(a) => commands::train_batch(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Convergence(a) => commands::convergence(a),
        Command::Serve(a) => commands::serve(a),
        Command::BenchRank(a) => commands::bench_rank(a),
    }
}
