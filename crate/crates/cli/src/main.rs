//! `evlol` command-line entry point.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Event-assisted low-light video object segmentation.
#[derive(Debug, Parser)]
#[command(name = "evlol", version)]
struct Cli {
    /// Root seed. Without it, `train` uses the config file's seed; otherwise
    /// EVLOL_SEED, then 0.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build a low-light sequence (frames, masks, events) from normal-light
    /// frames and masks, or generate the moving-shapes toy dataset.
    Synth(SynthArgs),
    /// Simulate an event stream from a frame directory into an EVT1 file.
    SimulateEvents(SimulateArgs),
    /// Train a segmentation model.
    Train(TrainArgs),
    /// Segment sequences with a trained checkpoint.
    Infer(InferArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Tabulate evaluation summaries and loss logs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of normal-light PNG frames (sorted by name).
    #[arg(long, required_unless_present = "toy")]
    pub frames: Option<PathBuf>,
    /// Directory of label-map PNG masks, one per frame.
    #[arg(long, required_unless_present = "toy")]
    pub masks: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Frame interpolation factor before event simulation.
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    #[arg(long, default_value_t = 40_000)]
    pub frame_interval_us: u64,
    #[arg(long, default_value_t = 5)]
    pub bins: usize,
    /// Sequence name (defaults to the output directory name).
    #[arg(long)]
    pub id: Option<String>,
    /// Generate the moving-shapes toy dataset under `out/{train,val}`.
    #[arg(long, conflicts_with_all = ["frames", "masks"])]
    pub toy: bool,
    #[arg(long, default_value_t = 24)]
    pub toy_train: usize,
    #[arg(long, default_value_t = 8)]
    pub toy_val: usize,
    #[arg(long, default_value_t = 20)]
    pub toy_frames: usize,
    #[arg(long, default_value_t = 64)]
    pub toy_size: usize,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Directory of PNG frames (sorted by name).
    #[arg(long)]
    pub frames: PathBuf,
    /// Output EVT1 file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40_000)]
    pub frame_interval_us: u64,
    #[arg(long, default_value_t = 4)]
    pub factor: usize,
    #[arg(long, default_value_t = 0.15)]
    pub threshold_pos: f64,
    #[arg(long, default_value_t = 0.15)]
    pub threshold_neg: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML or JSON configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    pub profile: String,
    /// Output directory for manifest, loss log and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Continue from this checkpoint (loss log is continued in `out`).
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A sequence directory or a directory of sequences.
    #[arg(long)]
    pub sequence: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Feed zeros to the event branch.
    #[arg(long)]
    pub no_event: bool,
    /// Feed zeros to the image branch.
    #[arg(long)]
    pub no_image: bool,
    /// Use concatenation fusion (checkpoint must be trained that way).
    #[arg(long)]
    pub no_acmf: bool,
    /// Use ungated matching (checkpoint must be trained that way).
    #[arg(long)]
    pub no_egmm: bool,
    #[arg(long, default_value_t = 3)]
    pub egmm_blocks: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Predictions, one sub-directory of PNG masks per sequence.
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground truth: a dataset directory or a single sequence.
    #[arg(long)]
    pub gt: PathBuf,
    /// Output directory for `report.csv` and `summary.json`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// `summary.json` files written by `eval`, as `label=path` or `path`.
    #[arg(long = "summary")]
    pub summaries: Vec<String>,
    /// Loss logs written by `train`, as `label=path` or `path`.
    #[arg(long = "loss")]
    pub losses: Vec<String>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let policy = if cli.sequential {
        evlol_core::ExecPolicy::Sequential
    } else {
        evlol_core::ExecPolicy::Parallel
    };
    let result = commands::Context::new(cli.seed, policy).and_then(|ctx| match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::SimulateEvents(a) => commands::simulate_events(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Infer(a) => commands::infer(&ctx, a),
        Command::Eval(a) => commands::eval(&ctx, a),
        Command::Report(a) => commands::report(&ctx, a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
