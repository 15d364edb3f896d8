//! Device-side agent.
//!
//! The agent works out which identity to present, sends a `JoinRequest`
//! through its access point, and mirrors the verdict and any later status
//! events as a local interface status. It does not touch real network
//! interfaces; enforcement happens at the access point.

mod probe;

use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use thiserror::Error;
use tracing::{debug, warn};

use crate::model::{collate, normalize_serial, DeviceIdentity, DeviceStatus, ModelError, Verdict};
use crate::protocol::{read_message, write_message, AuthVerdict, Cause, ErrorBody, FrameError, JoinRequest, ProtocolMessage, StatusEvent};
use crate::session::ApId;

pub use probe::{probe_host, HostFacts};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configured identity needs a serial number")]
    MissingSerial,
    #[error(transparent)]
    InvalidIdentity(#[from] ModelError),
    #[error("firmware serial number unavailable: {0}")]
    ProbeUnavailable(String),
    #[error("server unreachable after {attempts} attempts: {last}")]
    ServerUnreachable { attempts: u32, last: io::Error },
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("server refused request ({}): {}", .0.reason, .0.detail)]
    Refused(ErrorBody),
    #[error("interface status unknown: no verdict received yet")]
    StatusUnknown,
    #[error("connection lost: {0}")]
    ConnectionLost(io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IdentityMode {
    Configured,
    Probed,
}

/// Where the agent's identity comes from. In `Configured` mode the serial
/// override is mandatory; in `Probed` mode overrides replace probed values
/// for hostname and IP only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentIdentitySource {
    pub mode: IdentityMode,
    pub serial: Option<String>,
    pub hostname: Option<String>,
    pub ip: Option<String>,
}

impl AgentIdentitySource {
    pub fn configured(serial: &str, hostname: &str, ip: &str) -> Self {
        AgentIdentitySource {
            mode: IdentityMode::Configured,
            serial: Some(serial.to_owned()),
            hostname: Some(hostname.to_owned()),
            ip: Some(ip.to_owned()),
        }
    }

    pub fn probed() -> Self {
        AgentIdentitySource {
            mode: IdentityMode::Probed,
            serial: None,
            hostname: None,
            ip: None,
        }
    }
}

pub fn probe_identity(source: &AgentIdentitySource) -> Result<DeviceIdentity, AgentError> {
    match source.mode {
        IdentityMode::Configured => {
            let serial = source.serial.as_deref().ok_or(AgentError::MissingSerial)?;
            let serial = normalize_serial(serial)?;
            let hostname = source.hostname.clone().unwrap_or_default();
            let ip = source.ip.clone().unwrap_or_else(|| "127.0.0.1".to_owned());
            Ok(collate(&hostname, &ip, serial)?)
        }
        IdentityMode::Probed => {
            let facts = probe_host();
            let serial = facts.serial.map_err(AgentError::ProbeUnavailable)?;
            let serial = normalize_serial(&serial)?;
            let hostname = source.hostname.clone().unwrap_or(facts.hostname);
            let ip = source.ip.clone().unwrap_or(facts.ip);
            Ok(collate(&hostname, &ip, serial)?)
        }
    }
}

const UNKNOWN: u8 = 0;
const ENABLED: u8 = 1;
const DISABLED: u8 = 2;

/// The agent's view of its own network access, readable from any thread.
#[derive(Debug)]
pub struct InterfaceState(AtomicU8);

impl Default for InterfaceState {
    fn default() -> Self {
        InterfaceState(AtomicU8::new(UNKNOWN))
    }
}

impl InterfaceState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on_verdict(&self, verdict: &AuthVerdict) {
        let status = match verdict.verdict {
            Verdict::Allow => DeviceStatus::Enabled,
            Verdict::Deny => DeviceStatus::Disabled,
        };
        self.set(status);
    }

    pub fn on_event(&self, event: &StatusEvent) {
        self.set(event.status);
    }

    fn set(&self, status: DeviceStatus) {
        let v = match status {
            DeviceStatus::Enabled => ENABLED,
            DeviceStatus::Disabled => DISABLED,
        };
        self.0.store(v, Ordering::SeqCst);
    }

    pub fn interface_status(&self) -> Result<DeviceStatus, AgentError> {
        match self.0.load(Ordering::SeqCst) {
            ENABLED => Ok(DeviceStatus::Enabled),
            DISABLED => Ok(DeviceStatus::Disabled),
            _ => Err(AgentError::StatusUnknown),
        }
    }
}

/// Exponential backoff for connecting to the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            base: Duration::from_millis(250),
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Sleeps between consecutive attempts: one fewer than `max_attempts`.
    pub fn delays(&self) -> impl Iterator<Item = Duration> + '_ {
        (0..self.max_attempts.saturating_sub(1)).map(move |i| self.base * self.factor.pow(i))
    }

    pub fn total_backoff(&self) -> Duration {
        self.delays().sum()
    }
}

/// A joined agent holding its connection to the server.
#[derive(Debug)]
pub struct Agent {
    identity: DeviceIdentity,
    ap: ApId,
    stream: TcpStream,
    state: Arc<InterfaceState>,
    last_verdict: AuthVerdict,
}

impl Agent {
    /// Connects to `server` (retrying per `policy`) and performs a join.
    pub fn join(
        server: impl ToSocketAddrs,
        ap: ApId,
        identity: DeviceIdentity,
        policy: RetryPolicy,
    ) -> Result<Agent, AgentError> {
        let addrs: Vec<_> = server
            .to_socket_addrs()
            .map_err(|last| AgentError::ServerUnreachable { attempts: 0, last })?
            .collect();
        let mut delays = policy.delays();
        let mut attempt = 0;
        let stream = loop {
            attempt += 1;
            match connect_any(&addrs) {
                Ok(s) => break s,
                Err(e) => match delays.next() {
                    Some(d) => {
                        debug!(attempt, error = %e, delay_ms = d.as_millis() as u64, "connect failed, backing off");
                        thread::sleep(d);
                    }
                    None => {
                        return Err(AgentError::ServerUnreachable {
                            attempts: attempt,
                            last: e,
                        })
                    }
                },
            }
        };
        let state = Arc::new(InterfaceState::new());
        let mut agent = Agent {
            identity,
            ap,
            stream,
            state,
            last_verdict: AuthVerdict {
                verdict: Verdict::Deny,
                reason: None,
                session_id: None,
            },
        };
        agent.rejoin()?;
        Ok(agent)
    }

    pub fn identity(&self) -> &DeviceIdentity {
        &self.identity
    }

    pub fn verdict(&self) -> &AuthVerdict {
        &self.last_verdict
    }

    /// Shared handle to the interface status.
    pub fn state(&self) -> Arc<InterfaceState> {
        self.state.clone()
    }

    pub fn interface_status(&self) -> Result<DeviceStatus, AgentError> {
        self.state.interface_status()
    }

    /// Sends a fresh `JoinRequest` on the open connection and waits for the
    /// verdict. Status events arriving meanwhile are applied in order.
    pub fn rejoin(&mut self) -> Result<&AuthVerdict, AgentError> {
        let req = ProtocolMessage::JoinRequest(JoinRequest {
            serial_raw: self.identity.serial().to_string(),
            hostname: self.identity.hostname().to_owned(),
            ip: self.identity.ip().to_owned(),
            ap_id: self.ap.to_string(),
        });
        write_message(&mut self.stream, &req).map_err(frame_err)?;
        loop {
            match read_message(&mut self.stream).map_err(frame_err)? {
                ProtocolMessage::AuthVerdict(v) => {
                    self.state.on_verdict(&v);
                    self.last_verdict = v;
                    return Ok(&self.last_verdict);
                }
                ProtocolMessage::StatusEvent(ev) => self.apply(&ev),
                ProtocolMessage::Error(e) => return Err(AgentError::Refused(e)),
                other => return Err(AgentError::ProtocolError(format!("unexpected {} reply", other.kind()))),
            }
        }
    }

    fn apply(&self, ev: &StatusEvent) {
        if ev.serial == self.identity.serial().as_str() {
            self.state.on_event(ev);
        } else {
            warn!(serial = %ev.serial, "status event for another device ignored");
        }
    }

    /// Blocks for the next status event and applies it. A rescan request is
    /// answered with an automatic re-join.
    pub fn next_event(&mut self) -> Result<StatusEvent, AgentError> {
        loop {
            match read_message(&mut self.stream).map_err(frame_err)? {
                ProtocolMessage::StatusEvent(ev) => {
                    self.apply(&ev);
                    if ev.cause == Cause::Rescan {
                        self.rejoin()?;
                    }
                    return Ok(ev);
                }
                ProtocolMessage::AuthVerdict(v) => {
                    self.state.on_verdict(&v);
                    self.last_verdict = v;
                }
                ProtocolMessage::Error(e) => return Err(AgentError::Refused(e)),
                other => return Err(AgentError::ProtocolError(format!("unexpected {}", other.kind()))),
            }
        }
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(timeout)
    }
}

fn connect_any(addrs: &[std::net::SocketAddr]) -> io::Result<TcpStream> {
    let mut last = io::Error::new(io::ErrorKind::InvalidInput, "no addresses to connect to");
    for addr in addrs {
        match TcpStream::connect_timeout(addr, Duration::from_secs(2)) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = e,
        }
    }
    Err(last)
}

fn frame_err(e: FrameError) -> AgentError {
    match e {
        FrameError::Io(io) => AgentError::ConnectionLost(io),
        other => AgentError::ProtocolError(other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenyReason;
    use std::net::TcpListener;
    use std::time::Instant;

    #[test]
    fn configured_identity_is_normalized() {
        let src = AgentIdentitySource::configured("sn-rafiki", "RAFIKI", "192.168.0.12");
        let id = probe_identity(&src).unwrap();
        assert_eq!(id.serial().as_str(), "SN-RAFIKI");
        assert_eq!(id.hostname(), "RAFIKI");
        assert_eq!(id.ip(), "192.168.0.12");
    }

    #[test]
    fn configured_without_serial_fails() {
        let src = AgentIdentitySource {
            serial: None,
            ..AgentIdentitySource::configured("x", "H", "10.0.0.1")
        };
        assert!(matches!(probe_identity(&src), Err(AgentError::MissingSerial)));
        let blank = AgentIdentitySource::configured("  ", "H", "10.0.0.1");
        assert!(matches!(
            probe_identity(&blank),
            Err(AgentError::InvalidIdentity(ModelError::EmptySerial))
        ));
    }

    #[test]
    fn probed_mode_never_fabricates() {
        // Either a real serial that is stable across probes, or an error.
        match probe_identity(&AgentIdentitySource::probed()) {
            Ok(first) => {
                let second = probe_identity(&AgentIdentitySource::probed()).unwrap();
                assert_eq!(first.serial(), second.serial());
            }
            Err(AgentError::ProbeUnavailable(_)) => {}
            Err(other) => panic!("unexpected probe error {other}"),
        }
    }

    #[test]
    fn interface_status_transitions() {
        let state = InterfaceState::new();
        assert!(matches!(state.interface_status(), Err(AgentError::StatusUnknown)));
        state.on_verdict(&AuthVerdict {
            verdict: Verdict::Deny,
            reason: Some(DenyReason::Unregistered),
            session_id: None,
        });
        assert_eq!(state.interface_status().unwrap(), DeviceStatus::Disabled);
        state.on_verdict(&AuthVerdict {
            verdict: Verdict::Allow,
            reason: None,
            session_id: Some("s".into()),
        });
        assert_eq!(state.interface_status().unwrap(), DeviceStatus::Enabled);
        state.on_event(&StatusEvent {
            serial: "X".into(),
            status: DeviceStatus::Disabled,
            cause: Cause::Operator,
        });
        assert_eq!(state.interface_status().unwrap(), DeviceStatus::Disabled);
    }

    #[test]
    fn default_backoff_schedule() {
        let p = RetryPolicy::default();
        let delays: Vec<_> = p.delays().map(|d| d.as_millis()).collect();
        assert_eq!(delays, [250, 500, 1000, 2000]);
        assert_eq!(p.total_backoff(), Duration::from_millis(3750));
    }

    fn closed_port() -> std::net::SocketAddr {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        drop(l);
        addr
    }

    #[test]
    fn unreachable_server_gives_up_after_max_attempts() {
        let policy = RetryPolicy {
            base: Duration::from_millis(5),
            factor: 2,
            max_attempts: 5,
        };
        let id = probe_identity(&AgentIdentitySource::configured("SN-1", "H", "10.0.0.1")).unwrap();
        let start = Instant::now();
        let err = Agent::join(closed_port(), "ap".into(), id, policy).unwrap_err();
        assert!(start.elapsed() >= Duration::from_millis(75));
        match err {
            AgentError::ServerUnreachable { attempts, .. } => assert_eq!(attempts, 5),
            other => panic!("expected ServerUnreachable, got {other}"),
        }
    }

    #[test]
    fn unreachable_server_default_schedule() {
        let id = probe_identity(&AgentIdentitySource::configured("SN-1", "H", "10.0.0.1")).unwrap();
        let start = Instant::now();
        let err = Agent::join(closed_port(), "ap".into(), id, RetryPolicy::default()).unwrap_err();
        let took = start.elapsed();
        assert!(matches!(err, AgentError::ServerUnreachable { attempts: 5, .. }));
        assert!(took >= Duration::from_millis(3750) && took < Duration::from_millis(6000), "{took:?}");
    }
}
