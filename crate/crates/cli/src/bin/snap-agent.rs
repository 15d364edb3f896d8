use std::process::ExitCode;

use clap::Parser;
use snap_cli::agent::AgentArgs;
use tracing_subscriber::EnvFilter;

/// Device agent: joins through an access point and follows status changes.
#[derive(Debug, Parser)]
#[command(name = "snap-agent", version)]
struct Cli {
    #[command(flatten)]
    agent: AgentArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    ExitCode::from(snap_cli::agent::run(&cli.agent) as u8)
}
