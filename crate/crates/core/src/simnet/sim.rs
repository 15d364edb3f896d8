use std::collections::{BTreeMap, VecDeque};
use std::sync::mpsc;
use std::sync::Arc;

use chrono::Duration;
use thiserror::Error;

use super::network::{Delivery, Destination, NetError, Network};
use crate::agent::{probe_identity, AgentError, AgentIdentitySource, InterfaceState};
use crate::clock::ManualClock;
use crate::model::{CanonicalSerial, DeviceIdentity, DeviceStatus};
use crate::protocol::{Action, AuthVerdict, Cause, JoinRequest, StatusEvent};
use crate::registry::RegistrationRecord;
use crate::service::{AuthService, ServiceError};
use crate::session::{ApId, SessionRecord};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown agent {0:?}")]
    UnknownAgent(String),
    #[error("agent {0:?} already started")]
    DuplicateAgent(String),
    #[error("serial {0} already belongs to another agent")]
    DuplicateSerial(CanonicalSerial),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Service(#[from] ServiceError),
    #[error(transparent)]
    Agent(#[from] AgentError),
}

/// One entry in the order things happened inside the simulation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimelineEntry {
    Associated { serial: CanonicalSerial, ap: ApId },
    Event { ap: ApId, event: StatusEvent },
    Frame { serial: CanonicalSerial, seq: u64, outcome: Delivery },
}

#[derive(Debug)]
pub struct SimAgent {
    name: String,
    identity: DeviceIdentity,
    ap: ApId,
    state: InterfaceState,
    verdict: Option<AuthVerdict>,
}

impl SimAgent {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn identity(&self) -> &DeviceIdentity {
        &self.identity
    }

    pub fn ap(&self) -> &ApId {
        &self.ap
    }

    pub fn verdict(&self) -> Option<&AuthVerdict> {
        self.verdict.as_ref()
    }

    pub fn interface_status(&self) -> Result<DeviceStatus, AgentError> {
        self.state.interface_status()
    }
}

/// A server, its access points and a set of agents, driven one step at a
/// time on a single thread. The clock moves one second per join so session
/// ordering is reproducible.
pub struct Simulation {
    service: AuthService,
    clock: Arc<ManualClock>,
    network: Network,
    agents: BTreeMap<String, SimAgent>,
    by_serial: BTreeMap<CanonicalSerial, String>,
    inbox: mpsc::Receiver<(ApId, StatusEvent)>,
    timeline: Vec<TimelineEntry>,
}

impl Simulation {
    pub fn new<I, S>(aps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let clock = Arc::new(ManualClock::at_epoch());
        let service = AuthService::in_memory(clock.clone());
        let (tx, inbox) = mpsc::channel();
        service.subscribe(move |ap: &ApId, ev: &StatusEvent| {
            let _ = tx.send((ap.clone(), ev.clone()));
        });
        Simulation {
            service,
            clock,
            network: Network::with_aps(aps),
            agents: BTreeMap::new(),
            by_serial: BTreeMap::new(),
            inbox,
            timeline: Vec::new(),
        }
    }

    pub fn service(&self) -> &AuthService {
        &self.service
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn timeline(&self) -> &[TimelineEntry] {
        &self.timeline
    }

    pub fn agent(&self, name: &str) -> Result<&SimAgent, SimError> {
        self.agents.get(name).ok_or_else(|| SimError::UnknownAgent(name.to_owned()))
    }

    pub fn agents(&self) -> impl Iterator<Item = &SimAgent> {
        self.agents.values()
    }

    pub fn register(&mut self, serial: &str, label: &str) -> Result<RegistrationRecord, SimError> {
        let r = self.service.register(serial, label)?;
        self.pump()?;
        Ok(r)
    }

    pub fn revoke(&mut self, serial: &str) -> Result<RegistrationRecord, SimError> {
        let r = self.service.revoke(serial)?;
        self.pump()?;
        Ok(r)
    }

    /// Creates an agent and associates it with `ap`. It does not join yet.
    pub fn start_agent(&mut self, name: &str, source: &AgentIdentitySource, ap: &ApId) -> Result<(), SimError> {
        if self.agents.contains_key(name) {
            return Err(SimError::DuplicateAgent(name.to_owned()));
        }
        let identity = probe_identity(source)?;
        if self.by_serial.contains_key(identity.serial()) {
            return Err(SimError::DuplicateSerial(identity.serial().clone()));
        }
        self.associate(identity.serial(), ap)?;
        self.by_serial.insert(identity.serial().clone(), name.to_owned());
        self.agents.insert(
            name.to_owned(),
            SimAgent {
                name: name.to_owned(),
                identity,
                ap: ap.clone(),
                state: InterfaceState::new(),
                verdict: None,
            },
        );
        Ok(())
    }

    fn associate(&mut self, serial: &CanonicalSerial, ap: &ApId) -> Result<(), SimError> {
        self.network.associate(ap, serial)?;
        self.timeline.push(TimelineEntry::Associated {
            serial: serial.clone(),
            ap: ap.clone(),
        });
        Ok(())
    }

    pub fn join(&mut self, name: &str) -> Result<AuthVerdict, SimError> {
        let verdict = self.join_once(name)?;
        self.pump()?;
        Ok(verdict)
    }

    fn join_once(&mut self, name: &str) -> Result<AuthVerdict, SimError> {
        self.clock.advance(Duration::seconds(1));
        let agent = self.agents.get(name).ok_or_else(|| SimError::UnknownAgent(name.to_owned()))?;
        let req = JoinRequest {
            serial_raw: agent.identity.serial().to_string(),
            hostname: agent.identity.hostname().to_owned(),
            ip: agent.identity.ip().to_owned(),
            ap_id: agent.ap.to_string(),
        };
        let verdict = self.service.handle_join(&req)?;
        let agent = self.agents.get_mut(name).expect("looked up above");
        agent.state.on_verdict(&verdict);
        agent.verdict = Some(verdict.clone());
        Ok(verdict)
    }

    /// Moves an agent to another access point and re-joins through it.
    pub fn roam(&mut self, name: &str, ap: &ApId) -> Result<AuthVerdict, SimError> {
        let serial = self.agent(name)?.identity.serial().clone();
        self.associate(&serial, ap)?;
        self.agents.get_mut(name).expect("checked").ap = ap.clone();
        self.join(name)
    }

    pub fn control(&mut self, serial: &str, action: Action, operator: &str) -> Result<SessionRecord, SimError> {
        let serial = CanonicalSerial::try_from(serial).map_err(ServiceError::BadSerial)?;
        let r = self.service.set_status(&serial, action, operator)?;
        self.pump()?;
        Ok(r)
    }

    pub fn rescan(&mut self) -> Result<usize, SimError> {
        let n = self.service.rescan()?;
        self.pump()?;
        Ok(n)
    }

    /// Injects a frame from the agent's device straight at its access point,
    /// bypassing the agent's own status. This is how enforcement is probed.
    pub fn probe(&mut self, name: &str) -> Result<Delivery, SimError> {
        let serial = self.agent(name)?.identity.serial().clone();
        self.send_frame(&serial, Destination::Server)
    }

    /// Sends traffic the way a well-behaved agent would: only while its own
    /// interface status is `Enabled`. Returns `None` when the agent holds
    /// its traffic back.
    pub fn agent_send(&mut self, name: &str, dst: Destination) -> Result<Option<Delivery>, SimError> {
        let agent = self.agent(name)?;
        if agent.interface_status().ok() != Some(DeviceStatus::Enabled) {
            return Ok(None);
        }
        let serial = agent.identity.serial().clone();
        self.send_frame(&serial, dst).map(Some)
    }

    fn send_frame(&mut self, serial: &CanonicalSerial, dst: Destination) -> Result<Delivery, SimError> {
        let frame = self.network.frame(serial, dst, b"probe".to_vec());
        let outcome = self.network.deliver(&frame)?;
        self.timeline.push(TimelineEntry::Frame {
            serial: serial.clone(),
            seq: frame.seq,
            outcome,
        });
        Ok(outcome)
    }

    /// Applies queued status events in emission order. Agents asked to
    /// re-join by a rescan do so here, which may queue further events.
    pub fn pump(&mut self) -> Result<(), SimError> {
        let mut rejoin = VecDeque::new();
        loop {
            while let Ok((ap, event)) = self.inbox.try_recv() {
                self.network.apply_status(Some(&ap), &event);
                if let Some(name) = CanonicalSerial::try_from(event.serial.as_str())
                    .ok()
                    .and_then(|s| self.by_serial.get(&s))
                {
                    let agent = self.agents.get(name).expect("index is consistent");
                    if agent.ap == ap {
                        agent.state.on_event(&event);
                        if event.cause == Cause::Rescan {
                            rejoin.push_back(name.clone());
                        }
                    }
                }
                self.timeline.push(TimelineEntry::Event { ap, event });
            }
            match rejoin.pop_front() {
                Some(name) => {
                    self.join_once(&name)?;
                }
                None => return Ok(()),
            }
        }
    }

    /// True when every associated device's gate matches its session status
    /// (no session means closed).
    pub fn gates_match_sessions(&self) -> bool {
        self.agents.values().all(|a| {
            let session = self
                .service
                .session(a.identity.serial())
                .filter(|s| s.ap_id() == &a.ap)
                .map_or(DeviceStatus::Disabled, |s| s.status());
            self.network.gate(a.identity.serial()) == Some(session)
        })
    }
}
