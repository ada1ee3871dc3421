use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use cpa_synth::cli::{run, Command, RunConfig};

/// Offline synthesis of CPA Lyapunov functions and stabilizing controllers
/// for constrained control-affine systems, with certificate verification and
/// closed-loop simulation.
#[derive(Parser)]
#[command(name = "cpa-synth", version)]
struct Args {
    /// One of: synthesize | verify | simulate | export-plots.
    #[arg(long)]
    command: Command,
    /// Path to the JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Artifact directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the random seed of the simple initialization.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let args = Args::parse();
    let config = match RunConfig::from_path(&args.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            let _ = std::fs::create_dir_all(&args.out);
            cpa_synth::cli::write_error_artifact(&args.out, &e);
            return ExitCode::from(2);
        }
    };
    match run(args.command, &config, &args.out, args.seed) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            cpa_synth::cli::write_error_artifact(&args.out, &e);
            ExitCode::FAILURE
        }
    }
}
