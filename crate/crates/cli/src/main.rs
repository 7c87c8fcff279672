//! `luxmix`: simulate, calibrate, train, evaluate and unmix from the shell.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical fault.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use luxmix::Error;

#[derive(Parser, Debug)]
#[command(name = "luxmix", version, about = "Fluorescence attenuation correction and spectral unmixing")]
struct Cli {
    /// Seed for every random draw of the run.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "luxmix-out")]
    out: PathBuf,
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a labeled dataset (CSV plus grid sidecar).
    Synth,
    /// Calibrate the dual-band exponent and evaluate the NNLS baseline.
    Baseline(DataArgs),
    /// Train ACU-Net or one ACU-SA stage.
    Train(TrainArgs),
    /// Evaluate a checkpoint or the baseline on a labeled dataset.
    Eval(EvalArgs),
    /// Unmix a fluorescence cube into abundance maps.
    UnmixCube(UnmixArgs),
    /// Render a map CSV as an 8-bit PGM.
    Render(RenderArgs),
    /// Compare analytic and finite-difference gradients of every kernel and objective.
    Gradcheck(GradcheckArgs),
    /// Run the full comparison of baseline, ACU-Net and ACU-SA.
    Repro,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset CSV; simulated from the configuration when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Model {
    AcuNet,
    AcuSa,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    model: Model,
    /// ACU-SA stage.
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    stage: Option<u8>,
    #[command(flatten)]
    data: DataArgs,
    /// Encoder checkpoint from stage 1, required for stage 2.
    #[arg(long)]
    hu: Option<PathBuf>,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args, Debug)]
struct EngineArgs {
    /// Model checkpoint (ACU-Net, or the ACU-SA encoder).
    #[arg(long, conflicts_with = "baseline")]
    checkpoint: Option<PathBuf>,
    /// ACU-SA normalization checkpoint.
    #[arg(long, requires = "checkpoint")]
    norm: Option<PathBuf>,
    /// Use the dual-band baseline instead of a checkpoint.
    #[arg(long)]
    baseline: bool,
    /// Dual-band exponent for the baseline; defaults to the configuration.
    #[arg(long, requires = "baseline")]
    beta: Option<f64>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args, Debug)]
struct UnmixArgs {
    #[arg(long)]
    fluo: PathBuf,
    #[arg(long)]
    white: PathBuf,
    /// Dark frame subtracted from both cubes.
    #[arg(long)]
    dark: Option<PathBuf>,
    /// `baseline` or a checkpoint path.
    #[arg(long)]
    engine: String,
    /// ACU-SA normalization checkpoint.
    #[arg(long)]
    norm: Option<PathBuf>,
    /// Dual-band exponent for the baseline engine.
    #[arg(long)]
    beta: Option<f64>,
    /// Side of the averaged square tiles; 1 unmixes every pixel.
    #[arg(long, default_value_t = 1)]
    region: usize,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Map CSV, one image row per line, `nan` for invalid pixels.
    #[arg(long)]
    input: PathBuf,
    /// PGM path; defaults to the input name under `--out`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = luxmix::sweep::SWEEP_PROBES)]
    probes: usize,
}

/// Maps an error to the documented exit code.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) => 1,
        Error::Solver { .. } | Error::NonFinite { .. } => 3,
        Error::Dimension { .. }
        | Error::Range { .. }
        | Error::Degenerate { .. }
        | Error::Format { .. }
        | Error::Parse { .. }
        | Error::Io { .. } => 2,
    }
}

fn configure_threads() -> luxmix::Result<()> {
    let Ok(v) = std::env::var("LUXMIX_THREADS") else { return Ok(()) };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("LUXMIX_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size the worker pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|_| commands::run(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("luxmix: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
