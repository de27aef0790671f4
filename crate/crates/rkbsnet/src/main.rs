//! `rkbsnet` command-line entry point.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use rkbsnet::{run, CliError, Command, ExperimentConfig, Format, Status};

/// Exact power-series analysis of tanh networks: kernels, canonical scaling and complexity bounds.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Write the report here as well as to standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Report format.
    #[arg(long, global = true, value_enum, default_value = "json")]
    format: Format,
}

fn execute(cli: &Cli) -> Result<Status, CliError> {
    let path = cli.config.as_ref().ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let bundle = run(cli.command, &config)?;
    let text = bundle.render(cli.format)?;
    if let Some(out) = cli.out.as_ref().or(config.output.as_ref()) {
        std::fs::write(out, &text).map_err(|e| CliError::Output(format!("cannot write {}: {e}", out.display())))?;
    }
    std::io::stdout().write_all(text.as_bytes()).map_err(|e| CliError::Output(e.to_string()))?;
    Ok(bundle.status)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("RKBSNET_LOG", "warn")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::Fail) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
