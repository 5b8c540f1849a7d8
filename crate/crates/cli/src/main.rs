use std::path::PathBuf;
use std::process::ExitCode;

use bayeslora_cli::{run_from_path, Mode, Overrides};
use clap::Parser;

/// Train, evaluate, sweep, tune and ablate Bayesian low-rank adapters on
/// the synthetic benchmarks.
#[derive(Debug, Parser)]
#[command(name = "bayeslora", version)]
struct Args {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; replaces the configured seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// train | eval | sweep-samples | hpo | map-recovery | ablate-flow | ablate-rank
    #[arg(long)]
    mode: Option<Mode>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = Args::parse();
    let overrides = Overrides { mode: args.mode, seed: args.seed, out: args.out };
    match run_from_path(args.config.as_deref(), &overrides) {
        Ok(report) => {
            println!("{}", serde_json::json!({ "status": "ok", "out": report.out, "files": report.files, "summary": report.summary }));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
