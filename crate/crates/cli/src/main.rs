mod commands;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use exit::{CliError, Kind};

#[derive(Debug, Parser)]
#[command(name = "layoutfuse", version, about = "Subject disambiguation and layout-fused attention in a toy video diffusion sandbox")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a video from a layout file and write all artifacts.
    Run(RunArgs),
    /// Re-run from a manifest and check that the frames match.
    Replay(ReplayArgs),
    /// Render similarity tables, attention maps and mask overlays for a run.
    Inspect(InspectArgs),
    /// Print the disambiguation quantities for a layout's prompt as JSON.
    Sad(SadArgs),
    /// Train the toy denoiser on moving squares and save its weights.
    Train(TrainArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    Crossattn,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SemanticsArg {
    Additive,
    Mult,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    layout: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    no_sad: bool,
    #[arg(long, allow_negative_numbers = true)]
    dlfa_fraction: Option<f64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    mask_semantics: Option<SemanticsArg>,
    #[arg(long)]
    context_symmetric: bool,
    #[arg(long)]
    strict_threshold: bool,
    #[arg(long)]
    steps: Option<usize>,
    /// Trained weights file; overrides `weights` from the config.
    #[arg(long)]
    weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// A completed run directory.
    #[arg(long)]
    run: PathBuf,
    /// Where to write images; defaults to `<run>/inspect`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Pixel enlargement factor for the written images.
    #[arg(long, default_value_t = 8)]
    scale: usize,
}

#[derive(Debug, Args)]
struct SadArgs {
    #[arg(long)]
    layout: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Where to write the weights file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    weight_seed: Option<u64>,
    /// Print the smoothed loss every this many iterations (0 disables).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let line = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", CliError::new(Kind::Usage, line));
            return ExitCode::from(Kind::Usage.code());
        }
    };
    let result = match cli.command {
        Command::Run(a) => commands::run(a),
        Command::Replay(a) => commands::replay(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Sad(a) => commands::sad(a),
        Command::Train(a) => commands::train(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.kind.code())
        }
    }
}
