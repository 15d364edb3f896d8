//! The device agent loop behind `snap agent` and `snap-agent`.

use std::io::Write;

use clap::Args;
use snap_core::agent::{probe_identity, Agent, AgentError, AgentIdentitySource, IdentityMode, RetryPolicy};
use snap_core::model::DeviceIdentity;
use snap_core::session::ApId;

use crate::exit;

#[derive(Debug, Clone, Args)]
pub struct AgentArgs {
    /// Device port of the server, as host:port.
    #[arg(long, default_value = "127.0.0.1:7401")]
    pub server: String,
    /// Access point this device joins through.
    #[arg(long)]
    pub ap: String,
    /// Serial number to present.
    #[arg(long, required_unless_present = "probe", conflicts_with = "probe")]
    pub serial: Option<String>,
    /// Host name to report. With --probe it defaults to this machine's name.
    #[arg(long)]
    pub hostname: Option<String>,
    /// IP address to report. Defaults to 127.0.0.1, or to the outbound address with --probe.
    #[arg(long)]
    pub ip: Option<String>,
    /// Read the serial number from the host firmware instead.
    #[arg(long)]
    pub probe: bool,
    /// Exit after the first verdict instead of following status events.
    #[arg(long)]
    pub once: bool,
}

impl AgentArgs {
    pub fn source(&self) -> AgentIdentitySource {
        AgentIdentitySource {
            mode: if self.probe {
                IdentityMode::Probed
            } else {
                IdentityMode::Configured
            },
            serial: self.serial.clone(),
            hostname: self.hostname.clone(),
            ip: self.ip.clone(),
        }
    }
}

fn describe(agent: &Agent) -> String {
    let v = agent.verdict();
    let status = match agent.interface_status() {
        Ok(s) => format!("{s:?}"),
        Err(_) => "Unknown".into(),
    };
    match &v.reason {
        Some(reason) => format!("verdict {} ({reason}); interface {status}", v.verdict),
        None => format!("verdict {}; interface {status}", v.verdict),
    }
}

fn connect(args: &AgentArgs, identity: &DeviceIdentity) -> Result<Agent, AgentError> {
    Agent::join(
        args.server.as_str(),
        ApId::new(args.ap.clone()),
        identity.clone(),
        RetryPolicy::default(),
    )
}

/// Runs the agent and returns the process exit code.
pub fn run(args: &AgentArgs) -> i32 {
    let identity = match probe_identity(&args.source()) {
        Ok(id) => id,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::USAGE;
        }
    };
    let mut out = std::io::stdout();
    let _ = writeln!(
        out,
        "{} ({}, {}) joining via {} at {}",
        identity.serial(),
        identity.hostname(),
        identity.ip(),
        args.ap,
        args.server
    );
    let mut agent = match connect(args, &identity) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return exit::FAILURE;
        }
    };
    let _ = writeln!(out, "{}", describe(&agent));
    if args.once {
        return exit::OK;
    }
    loop {
        match agent.next_event() {
            Ok(ev) => {
                let _ = writeln!(out, "status {:?} (cause {:?}); {}", ev.status, ev.cause, describe(&agent));
            }
            Err(AgentError::ConnectionLost(e)) => {
                eprintln!("connection lost ({e}); rejoining");
                agent = match connect(args, &identity) {
                    Ok(a) => a,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return exit::FAILURE;
                    }
                };
                let _ = writeln!(out, "{}", describe(&agent));
            }
            Err(e) => {
                eprintln!("error: {e}");
                return exit::FAILURE;
            }
        }
    }
}
