use std::io::{BufRead, Write};
use std::net::IpAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde_json::Value;
use snap_cli::agent::AgentArgs;
use snap_cli::client::{AdminClient, DEFAULT_ADMIN_URL};
use snap_cli::{exit, table};
use snap_core::simnet::{builtin, load_script, run_scenario};
use snap_server::{ServerConfig, DEFAULT_ADMIN_PORT, DEFAULT_DEVICE_PORT};
use tracing_subscriber::EnvFilter;

/// Serial-number based network access control.
#[derive(Debug, Parser)]
#[command(name = "snap", version)]
struct Cli {
    /// Base URL of the admin API.
    #[arg(long, env = "SNAP_ADMIN_URL", default_value = DEFAULT_ADMIN_URL, global = true)]
    admin_url: String,
    /// Print one JSON document instead of a table.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the server until interrupted.
    Serve(ServeArgs),
    /// Register a serial number.
    Register {
        serial: String,
        #[arg(long, default_value = "")]
        label: String,
    },
    /// Revoke a registration.
    Revoke { serial: String },
    /// Show registered serial numbers.
    ListRegistered,
    /// Show the connected devices table.
    ListConnected,
    /// Block a connected device.
    Disable {
        serial: String,
        /// Skip the confirmation prompt.
        #[arg(long, short)]
        yes: bool,
    },
    /// Unblock a connected, registered device.
    Enable { serial: String },
    /// Drop every session and ask devices to join again.
    Rescan,
    /// Run a scenario script (a path, or `paper-demo`) in-process.
    Scenario { script: String },
    /// Run a device agent.
    Agent(AgentArgs),
}

#[derive(Debug, clap::Args)]
struct ServeArgs {
    /// TCP port agents connect to.
    #[arg(long, env = "SNAP_DEVICE_PORT", default_value_t = DEFAULT_DEVICE_PORT)]
    device_port: u16,
    /// HTTP port for the admin API and console.
    #[arg(long, env = "SNAP_ADMIN_PORT", default_value_t = DEFAULT_ADMIN_PORT)]
    admin_port: u16,
    /// Directory holding registry.jsonl and sessions.json.
    #[arg(long, env = "SNAP_DATA_DIR", default_value = "snap-data")]
    data_dir: PathBuf,
    /// Address the admin API listens on.
    #[arg(long, default_value = "127.0.0.1")]
    admin_bind: IpAddr,
    /// Address the device port listens on.
    #[arg(long, default_value = "0.0.0.0")]
    device_bind: IpAddr,
    /// Keep sessions from the previous run instead of purging them.
    #[arg(long)]
    no_purge: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default_level = if matches!(cli.command, Command::Serve(_)) { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default_level)))
        .with_writer(std::io::stderr)
        .init();
    let code = match cli.command {
        Command::Serve(ref args) => match serve(args) {
            Ok(()) => exit::OK,
            Err(e) => {
                eprintln!("error: {e:#}");
                exit::FAILURE
            }
        },
        Command::Scenario { ref script } => scenario(script, cli.json),
        Command::Agent(ref args) => snap_cli::agent::run(args),
        _ => admin(&cli),
    };
    ExitCode::from(code as u8)
}

fn serve(args: &ServeArgs) -> anyhow::Result<()> {
    let config = ServerConfig {
        device_bind: args.device_bind,
        device_port: args.device_port,
        admin_bind: args.admin_bind,
        admin_port: args.admin_port,
        data_dir: args.data_dir.clone(),
        purge_on_start: !args.no_purge,
    };
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async {
        let server = snap_server::start(config).await?;
        println!("device port {}", server.device_addr());
        println!("admin API   http://{}", server.admin_addr());
        wait_for_signal().await;
        server.shutdown().await;
        Ok(())
    })
}

async fn wait_for_signal() {
    #[cfg(unix)]
    {
        use tokio::signal::unix::{signal, SignalKind};
        let mut term = signal(SignalKind::terminate()).expect("install SIGTERM handler");
        tokio::select! {
            _ = tokio::signal::ctrl_c() => {}
            _ = term.recv() => {}
        }
    }
    #[cfg(not(unix))]
    {
        let _ = tokio::signal::ctrl_c().await;
    }
}

fn scenario(name: &str, json: bool) -> i32 {
    let script = match builtin(name) {
        Some(s) => Ok(s),
        None => load_script(std::path::Path::new(name)),
    };
    let report = script.and_then(|s| run_scenario(&s));
    match report {
        Ok(report) => {
            if json {
                println!("{}", report.to_json());
            } else {
                print!("{}", report.render_table());
            }
            if report.all_yes() {
                exit::OK
            } else {
                exit::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit::USAGE
        }
    }
}

fn confirm(question: &str) -> bool {
    print!("{question} [y/N] ");
    let _ = std::io::stdout().flush();
    let mut answer = String::new();
    if std::io::stdin().lock().read_line(&mut answer).is_err() {
        return false;
    }
    matches!(answer.trim().to_ascii_lowercase().as_str(), "y" | "yes")
}

fn admin(cli: &Cli) -> i32 {
    let client = AdminClient::new(&cli.admin_url);
    let result = match &cli.command {
        Command::Register { serial, label } => client.register(serial, label),
        Command::Revoke { serial } => client.revoke(serial),
        Command::ListRegistered => client.list_registered(),
        Command::ListConnected => client.list_connected(),
        Command::Disable { serial, yes } => {
            if !yes && !confirm(&format!("Disable {serial}?")) {
                eprintln!("not disabled");
                return exit::FAILURE;
            }
            client.disable(serial)
        }
        Command::Enable { serial } => client.enable(serial),
        Command::Rescan => client.rescan(),
        Command::Serve(_) | Command::Scenario { .. } | Command::Agent(_) => unreachable!("handled in main"),
    };
    match result {
        Ok(value) => {
            if cli.json {
                println!("{value}");
            } else {
                print!("{}", human(&cli.command, &value));
            }
            exit::OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit::FAILURE
        }
    }
}

fn field(v: &Value, key: &str) -> String {
    match &v[key] {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn human(command: &Command, v: &Value) -> String {
    let empty = Vec::new();
    let rows = v.as_array().unwrap_or(&empty);
    match command {
        Command::ListRegistered => table::render(
            &["SERIAL", "LABEL", "REGISTERED AT"],
            &rows
                .iter()
                .map(|r| vec![field(r, "serial"), field(r, "label"), field(r, "registered_at")])
                .collect::<Vec<_>>(),
        ),
        Command::ListConnected => table::render(
            &["SERIAL", "NAME", "IP", "AP", "VERDICT", "STATUS", "CONNECTED AT"],
            &rows
                .iter()
                .map(|r| {
                    let verdict = match field(r, "reason").as_str() {
                        "" => field(r, "verdict"),
                        reason => format!("{} ({reason})", field(r, "verdict")),
                    };
                    vec![
                        field(r, "serial"),
                        field(r, "hostname"),
                        field(r, "ip"),
                        field(r, "ap_id"),
                        verdict,
                        field(r, "status"),
                        field(r, "connected_at"),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
        Command::Register { .. } => format!("registered {}\n", field(v, "serial")),
        Command::Revoke { .. } => format!("revoked {}\n", field(v, "serial")),
        Command::Disable { .. } | Command::Enable { .. } => {
            format!("{} is now {}\n", field(v, "serial"), field(v, "status"))
        }
        Command::Rescan => format!("purged {} session(s)\n", field(v, "purged")),
        Command::Serve(_) | Command::Scenario { .. } | Command::Agent(_) => String::new(),
    }
}
