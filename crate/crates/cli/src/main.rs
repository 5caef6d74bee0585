//! `iod`: synthesize data, train, evaluate, fuse and check gradients.
//!
//! Exit codes: 0 on success, 1 for bad arguments or inputs, 2 when a run
//! fails (including a failing gradient check).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "iod", version, about = "Multi-task event recognition with object detection")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (images plus manifest.json).
    Synth(SynthArgs),
    /// Train the cascaded multi-task network or the single-task baseline.
    Train(TrainArgs),
    /// Evaluate a checkpoint and write the metric report.
    Eval(EvalArgs),
    /// Late fusion of several models.
    #[command(subcommand)]
    Fuse(FuseCommand),
    /// Finite-difference check of every layer and the full network.
    Gradcheck(GradcheckArgs),
    /// Event scores for one image.
    Infer(InferArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    min_size: usize,
    #[arg(long, default_value_t = 64)]
    max_size: usize,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// TOML training config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory or manifest file.
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Train the single-task event baseline instead of the cascade.
    #[arg(long)]
    single: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file; the `.iodc` extension may be left off.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON metric report.
    #[arg(long)]
    report: PathBuf,
    /// Also write per-image event scores as CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Rigid proposal file; dense grid proposals otherwise.
    #[arg(long)]
    proposals: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    rigid_iou: f64,
    #[arg(long, default_value_t = 0.2)]
    nonrigid_iou: f64,
}

#[derive(Subcommand, Debug)]
enum FuseCommand {
    /// Weighted average of per-image score files.
    Scores(FuseScoresArgs),
    /// Hinge-loss linear classifier on concatenated event fc7 features.
    Features(FuseFeaturesArgs),
}

#[derive(Args, Debug)]
struct FuseScoresArgs {
    /// Score CSVs (`image_id,score_benign,score_malicious`), one per model.
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    /// Comma-separated weights summing to 1; uniform when omitted.
    #[arg(long, value_delimiter = ',', conflicts_with = "search")]
    weights: Option<Vec<f64>>,
    /// Grid-search the weights (step 0.1) for the best AP on --data.
    #[arg(long, requires = "data")]
    search: bool,
    /// Dataset providing event labels, for --search and the AP report.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Fused score CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FuseFeaturesArgs {
    /// Checkpoints whose event fc7 features are concatenated.
    #[arg(long, num_args = 2.., required = true)]
    checkpoints: Vec<PathBuf>,
    /// Training set for the classifier.
    #[arg(long)]
    train: PathBuf,
    /// Images to score.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 0.01)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1000)]
    epochs: usize,
    /// Score CSV; score_malicious holds the signed margin.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    seeds: u64,
    /// Check one component only.
    #[arg(long)]
    component: Option<String>,
    /// Also write the results as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Fuse(FuseCommand::Scores(a)) => commands::fuse_scores(a),
        Command::Fuse(FuseCommand::Features(a)) => commands::fuse_features(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Infer(a) => commands::infer(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
