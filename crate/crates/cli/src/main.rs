//! `lungforge` command-line interface.
//!
//! Exit codes: 0 success, 2 usage, config or input error, 3 numerical
//! failure. `LUNGFORGE_THREADS` caps the worker pool.

mod dce;
mod error;
mod evaluate;
mod gap;
mod hit_rate;
mod inputs;
mod phantom;
mod pretrain;
mod run;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use error::{usage, CliResult, EXIT_USAGE};

#[derive(Debug, Parser)]
#[command(name = "lungforge", version, about = "Contrast enhancement, contrastive pretraining and domain-gap tools for chest radiographs")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a labeled phantom corpus.
    PhantomGen(phantom::Args),
    /// Train the enhancement network on a directory of images.
    TrainDce(dce::TrainArgs),
    /// Enhance a directory of images with a trained checkpoint.
    Enhance(dce::EnhanceArgs),
    /// Texture features, MMD distances and an MDS map across datasets.
    DomainGap(gap::Args),
    /// Contrastive pretraining of the encoder.
    Pretrain(pretrain::Args),
    /// Run the variant comparison described by an experiment spec.
    Evaluate(evaluate::Args),
    /// Fraction of attention maxima inside annotated regions.
    HitRate(hit_rate::Args),
}

fn init_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("LUNGFORGE_THREADS") else {
        return Ok(());
    };
    match raw.trim().parse::<usize>() {
        Ok(n) if n >= 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .or_else(|e| usage(format!("cannot size the worker pool: {e}"))),
        _ => usage(format!("LUNGFORGE_THREADS must be a positive integer, got {raw:?}")),
    }
}

fn dispatch(cli: Cli) -> CliResult<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::PhantomGen(a) => phantom::run(a),
        Command::TrainDce(a) => dce::train(a),
        Command::Enhance(a) => dce::enhance(a),
        Command::DomainGap(a) => gap::run(a),
        Command::Pretrain(a) => pretrain::run(a),
        Command::Evaluate(a) => evaluate::run(a),
        Command::HitRate(a) => hit_rate::run(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            if code == ExitCode::from(EXIT_USAGE) {
                eprintln!("run with --help for usage");
            }
            code
        }
    }
}
