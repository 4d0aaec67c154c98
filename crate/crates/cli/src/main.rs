//! `vdp`: train, sample from, evaluate and diagnose latent-prior VAEs.

mod commands;
mod error;
mod ppm;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

/// Variational autoencoders with Gaussian, flow and diffusion latent priors.
#[derive(Debug, Parser)]
#[command(name = "vdp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model from a key=value config file.
    Train(TrainArgs),
    /// Draw samples from a trained model.
    Sample(SampleArgs),
    /// Score a trained model on a dataset.
    Eval(EvalArgs),
    /// Print the per-step terms of a diffusion-prior bound.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; defaults to $VDP_OUT_ROOT/<config name>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SampleFormat {
    Csv,
    Ppm,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SampleFormat::Csv)]
    format: SampleFormat,
    /// Rows and columns of the PPM tile grid.
    #[arg(long, num_args = 2, value_names = ["ROWS", "COLS"])]
    grid: Option<Vec<usize>>,
    /// Sample pixels from the likelihood instead of rendering decoder means.
    #[arg(long)]
    draw_pixels: bool,
    /// Output file; defaults to $VDP_OUT_ROOT/samples.<format>.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Metric {
    Elbo,
    Mmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Debug, Args)]
struct DataArgs {
    /// `run` (the checkpoint's own dataset), `<toy>[:n[:seed]]` or `idx:<path>`.
    #[arg(long, default_value = "run")]
    dataset: String,
    /// Split to use; `validation` for `run`, `all` otherwise.
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    metric: Metric,
    /// Monte-Carlo draws per datum for `elbo`; model samples for `mmd`
    /// (defaults to the size of the split).
    #[arg(long)]
    n: Option<usize>,
    /// Defaults to the run's validation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory of the eval CSV; defaults to $VDP_OUT_ROOT.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 1)]
    n_mc: usize,
    /// Defaults to the run's validation seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Sample(a) => commands::sample(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Diagnose(a) => commands::diagnose(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

impl From<SplitArg> for vdp::Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => vdp::Split::Train,
            SplitArg::Validation => vdp::Split::Validation,
            SplitArg::Test => vdp::Split::Test,
            SplitArg::All => vdp::Split::All,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
