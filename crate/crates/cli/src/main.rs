use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use topoprep_cli::{run_pipeline, CliError, ExperimentConfig, Mode};

/// Proxy-driven topology preparation for decentralized learning.
///
/// Log verbosity follows RUST_LOG (for example RUST_LOG=info).
#[derive(Debug, Parser)]
#[command(name = "topoprep", version)]
struct Args {
    /// Stage to run; overrides `mode` in the config file.
    #[arg(value_enum)]
    verb: Mode,
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Master seed; overrides `seed` in the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config file (default `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(args: Args) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    cfg.mode = args.verb;
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    let out = args
        .out
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let summary = run_pipeline(&cfg, &out)?;
    for (name, digest) in &summary.manifest.files {
        println!("{digest}  {}", out.join(name).display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
