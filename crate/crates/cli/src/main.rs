use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod manifest;

use manifest::{Manifest, Status};

/// Particle, master-equation and mean-field experiments for spatial
/// birth-death-hopping populations.
#[derive(Debug, Parser)]
#[command(name = "popflow", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check detailed balance and generator reversibility.
    Validate(RunArgs),
    /// Run a stochastic simulation ensemble.
    Ssa(RunArgs),
    /// Solve the master equation on a truncated box.
    Master(RunArgs),
    /// Solve the mean-field equation.
    Meanfield(RunArgs),
    /// Sweep the population scale and compare with the mean-field limit.
    Sweep(RunArgs),
}

#[derive(Debug, Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long, env = "POPFLOW_CONFIG")]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, env = "POPFLOW_OUT", default_value = "popflow-out")]
    out: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long, env = "POPFLOW_SEED")]
    seed: Option<u64>,
    /// Worker threads; all cores when absent.
    #[arg(long, env = "POPFLOW_THREADS")]
    threads: Option<usize>,
}

impl Command {
    fn parts(&self) -> (&'static str, &RunArgs) {
        match self {
            Command::Validate(a) => ("validate", a),
            Command::Ssa(a) => ("ssa", a),
            Command::Master(a) => ("master", a),
            Command::Meanfield(a) => ("meanfield", a),
            Command::Sweep(a) => ("sweep", a),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (name, args) = cli.command.parts();

    if let Some(threads) = args.threads {
        if threads == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }

    let mut manifest = Manifest::new(name, args.threads);
    let status = match commands::load(&args.config, args.seed, &mut manifest) {
        Ok(config) => commands::run(name, &config, &args.out, &mut manifest),
        Err(e) => Status::Error(format!("{e:#}")),
    };
    manifest.finish(&status);
    if let Err(e) = manifest.write(&args.out) {
        eprintln!("error: cannot write manifest: {e:#}");
        return ExitCode::from(2);
    }
    match &status {
        Status::Ok => ExitCode::SUCCESS,
        Status::Failed(msg) => {
            eprintln!("failed: {msg}");
            ExitCode::from(1)
        }
        Status::Error(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
