//! `vilu`: command-line driver for failure prediction on precomputed
//! vision-language embeddings.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vilu_core::{Ablation, LossKind};

/// Exit status for bad invocations, matching clap's own usage errors.
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "vilu",
    version,
    about = "Post-hoc failure prediction on VLM embeddings"
)]
struct Cli {
    /// Print the JSON schema of the `--config` file and exit.
    #[arg(long)]
    print_config_schema: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic embedding dataset.
    Synth(SynthArgs),
    /// Train a ViLU (or LVU) uncertainty head.
    Train(TrainArgs),
    /// Score a dataset with a trained head or a baseline and report metrics.
    Eval(EvalArgs),
    /// Evaluate every training-free baseline on a dataset.
    Baseline(BaselineArgs),
    /// Grid search over learning rate and batch size.
    Gridsearch(GridArgs),
    /// Finite-difference check of the model gradients.
    Gradcheck(GradcheckArgs),
    /// Tabulate evaluation reports.
    Report(ReportArgs),
    /// Validate a dataset file and print its digest.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Label,
    Caption,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Base generator settings as JSON; flags below override it.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    class_spread: Option<f64>,
    #[arg(long)]
    degraded_fraction: Option<f64>,
    #[arg(long)]
    degraded_noise: Option<f64>,
    #[arg(long)]
    degraded_marker: Option<f64>,
    #[arg(long)]
    instance_scale: Option<f64>,
    #[arg(long)]
    caption_noise: Option<f64>,
    /// Minimum angle between class prototypes, in radians.
    #[arg(long)]
    min_angle: Option<f64>,
    #[arg(long)]
    tau: Option<f32>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LearnedMethod {
    Vilu,
    Lvu,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// JSON run configuration (see --print-config-schema); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "vilu")]
    method: LearnedMethod,
    /// Input components: visual, +pred, +xattn or full.
    #[arg(long, value_parser = parse_ablation)]
    ablate: Option<Ablation>,
    /// wbce, bce, wmse or mse.
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Drop the adaptive error weight from the loss.
    #[arg(long)]
    no_weighting: bool,
    /// MLP hidden sizes, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    /// Append the MCM score to the head input.
    #[arg(long)]
    append_mcm: bool,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    freeze_xa_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct DataArgs {
    #[arg(long)]
    data: PathBuf,
    /// Separate validation dataset.
    #[arg(long, conflicts_with = "val_frac")]
    val: Option<PathBuf>,
    /// Fraction of `--data` held out for validation; 0 trains on everything.
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Checkpoint path; the history CSV and manifest are written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_delimiter = ',')]
    lrs: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    batch_sizes: Option<Vec<usize>>,
    /// Checkpoint of the best run.
    #[arg(long)]
    out: PathBuf,
    /// Per-run results as CSV (default: `<out>.grid.csv`).
    #[arg(long)]
    results: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MethodArg {
    Mcm,
    Entropy,
    Doctor,
    TsMcm,
    Lvu,
    Vilu,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained checkpoint, required for vilu and lvu.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Scoring method; defaults to vilu when --model is given.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    /// Dataset used to fit the ts-mcm temperature.
    #[arg(long)]
    calib: Option<PathBuf>,
    /// Report JSON path; printed to stdout when omitted.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Histogram CSV path.
    #[arg(long)]
    histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    /// Evaluate at each of these batch sizes, one report each.
    #[arg(long, value_delimiter = ',', conflicts_with = "batch_size")]
    batch_size_sweep: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Include per-sample scores in the report.
    #[arg(long)]
    keep_scores: bool,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long)]
    data: PathBuf,
    /// Dataset used to fit the ts-mcm temperature; ts-mcm is skipped without it.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory receiving one report and histogram per method.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 8)]
    dim: usize,
    /// Number of candidate texts.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 300)]
    coordinates: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Flip the sign of one analytic gradient; the check must then fail.
    #[arg(long)]
    corrupt: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TableFormat {
    Csv,
    Markdown,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluation report JSON files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    format: TableFormat,
    /// Output file; printed to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
    /// Print the full validation report as JSON.
    #[arg(long)]
    json: bool,
}

fn parse_ablation(s: &str) -> Result<Ablation, String> {
    s.parse().map_err(|e: vilu_core::Error| e.to_string())
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: vilu_core::Error| e.to_string())
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("VILU_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        commands::usage(format!(
            "VILU_THREADS must be a positive integer, got `{raw}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads()?;
    if cli.print_config_schema {
        println!("{}", commands::config_schema()?);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(commands::usage("a subcommand is required (see --help)"));
    };
    match command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Baseline(a) => commands::baseline(a),
        Command::Gridsearch(a) => commands::gridsearch(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Report(a) => commands::report(a),
        Command::Inspect(a) => commands::inspect(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
