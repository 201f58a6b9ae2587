#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod data;
mod error;
mod evaluate;
mod infer;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliError, CliResult};
use crate::settings::Settings;

#[derive(Parser, Debug)]
#[command(name = "aeropose", version, about = "Aerial person pose dataset, evaluation and pipeline tools")]
struct Cli {
    /// TOML configuration file. Command-line flags take precedence over it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Print the effective configuration as TOML and exit.
    #[arg(long, global = true)]
    print_config: bool,

    /// Seed for every random choice (resolution stress sampling).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Cap on worker threads.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Filter each input to person classes and merge them into one dataset.
    Merge(data::MergeArgs),
    /// Print summary statistics of annotation files.
    Stats(data::StatsArgs),
    /// Box detection AP/AR against ground truth.
    EvalDet(evaluate::EvalDetArgs),
    /// Keypoint AP/AR (OKS) against ground truth.
    EvalKp(evaluate::EvalArgs),
    /// Run the top-down pipeline over a frame source.
    Run(infer::RunArgs),
    /// Per-stage latency of the pipeline.
    Bench(infer::BenchArgs),
    /// Draw results over their frames.
    Render(infer::RenderArgs),
    /// Serve ground-truth mock backends over stdin/stdout.
    #[command(hide = true)]
    ServeMock(infer::ServeArgs),
}

fn execute(cli: Cli) -> CliResult<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        settings.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        settings.jobs = jobs;
    }
    match &cli.command {
        Command::EvalDet(a) => a.apply(&mut settings),
        Command::EvalKp(a) => a.apply(&mut settings),
        Command::Run(a) => a.options.apply(&mut settings),
        Command::Bench(a) => a.apply(&mut settings),
        _ => {}
    }
    if let Some(s) = settings.run.stress.as_mut() {
        s.seed = settings.seed;
    }
    settings.validate()?;
    if cli.print_config {
        print!("{}", settings.to_toml());
        return Ok(());
    }
    if settings.jobs > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(settings.jobs)
            .build_global()
            .map_err(CliError::operational)?;
    }
    match cli.command {
        Command::Merge(a) => data::merge(&a),
        Command::Stats(a) => data::stats(&a),
        Command::EvalDet(a) => evaluate::eval_det(&a, &settings),
        Command::EvalKp(a) => evaluate::eval_kp(&a, &settings),
        Command::Run(a) => infer::run(&a, &settings),
        Command::Bench(a) => infer::bench(&a, &settings),
        Command::Render(a) => infer::render(&a),
        Command::ServeMock(a) => infer::serve_mock(&a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
