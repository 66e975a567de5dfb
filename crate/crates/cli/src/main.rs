use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use vbsens_cli::{run, RunConfig, Scale, Verb};

#[derive(Debug, Parser)]
#[command(name = "vbsens", version, about = "Prior-robustness analysis for variational Bayes fits")]
struct Args {
    #[command(subcommand)]
    verb: Verb,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Problem size of the hierarchical model; overrides the config.
    #[arg(long, global = true, value_enum)]
    scale: Option<Scale>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let Some(path) = &args.config else {
        eprintln!("error: --config <path> is required");
        return ExitCode::from(1);
    };
    let result = RunConfig::load(path)
        .map(|c| c.with_overrides(args.seed, args.scale))
        .and_then(|c| run(args.verb, c, &args.out));
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
