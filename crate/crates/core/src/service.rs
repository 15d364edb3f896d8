//! The authentication pipeline, independent of any transport.
//!
//! A join runs collect → collate → decide → record → enforce: the request's
//! serial is normalized, the identity triple assembled, the verdict taken
//! against a registry snapshot, the attempt stored in the session table and
//! a [`StatusEvent`] published so the access point can gate the device.
//!
//! All mutations go through one lock, so events reach subscribers in the
//! order the mutations happened.

use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};

use thiserror::Error;
use tracing::{debug, info};

use crate::clock::Clock;
use crate::model::{self, CanonicalSerial, DeviceStatus, ModelError};
use crate::protocol::{Action, AuthVerdict, Cause, ControlCommand, ErrorBody, JoinRequest, StatusEvent};
use crate::registry::{RegistrationRecord, Registry, RegistryError, RegistryView};
use crate::session::{ApId, SessionError, SessionRecord, SessionTable};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("bad serial: {0}")]
    BadSerial(ModelError),
    #[error(transparent)]
    BadIp(ModelError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Session(#[from] SessionError),
}

impl ServiceError {
    /// Short machine-readable reason used on the wire.
    pub fn reason(&self) -> &'static str {
        match self {
            ServiceError::BadSerial(_) => "bad-serial",
            ServiceError::BadIp(_) => "bad-ip",
            ServiceError::Registry(RegistryError::InvalidSerial(_)) => "bad-serial",
            ServiceError::Registry(RegistryError::NotRegistered(_)) => "not-registered",
            ServiceError::Session(SessionError::NoSuchSession(_)) => "no-such-session",
            ServiceError::Session(SessionError::CannotEnableDenied(_)) => "cannot-enable-denied",
            ServiceError::Registry(_) | ServiceError::Session(_) => "storage-failure",
        }
    }

    pub fn to_error_body(&self) -> ErrorBody {
        ErrorBody {
            reason: self.reason().to_owned(),
            detail: self.to_string(),
        }
    }
}

/// Receives every status change, tagged with the access point the device
/// is attached through.
pub trait EventSink: Send {
    fn publish(&self, ap: &ApId, event: &StatusEvent);
}

impl<F> EventSink for F
where
    F: Fn(&ApId, &StatusEvent) + Send,
{
    fn publish(&self, ap: &ApId, event: &StatusEvent) {
        self(ap, event)
    }
}

struct State {
    registry: Registry,
    sessions: SessionTable,
    sinks: Vec<Box<dyn EventSink>>,
}

impl State {
    fn emit(&self, ap: &ApId, serial: &CanonicalSerial, status: DeviceStatus, cause: Cause) {
        let event = StatusEvent {
            serial: serial.to_string(),
            status,
            cause,
        };
        debug!(ap = %ap, serial = %serial, ?status, ?cause, "status event");
        for sink in &self.sinks {
            sink.publish(ap, &event);
        }
    }
}

pub struct AuthService {
    state: Mutex<State>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for AuthService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AuthService").finish_non_exhaustive()
    }
}

impl AuthService {
    pub fn new(registry: Registry, sessions: SessionTable, clock: Arc<dyn Clock>) -> Self {
        AuthService {
            state: Mutex::new(State {
                registry,
                sessions,
                sinks: Vec::new(),
            }),
            clock,
        }
    }

    /// Fresh service with no persistence.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::new(Registry::in_memory(clock.clone()), SessionTable::new(), clock)
    }

    /// Service backed by `<data_dir>/registry.jsonl` and
    /// `<data_dir>/sessions.json`.
    pub fn open(data_dir: &Path, clock: Arc<dyn Clock>) -> Result<Self, ServiceError> {
        std::fs::create_dir_all(data_dir).map_err(|source| RegistryError::StorageFailure {
            path: data_dir.to_owned(),
            source,
        })?;
        let registry = Registry::load(data_dir.join("registry.jsonl"), clock.clone())?;
        let sessions = SessionTable::open(data_dir.join("sessions.json"))?;
        Ok(Self::new(registry, sessions, clock))
    }

    fn lock(&self) -> MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn subscribe(&self, sink: impl EventSink + 'static) {
        self.lock().sinks.push(Box::new(sink));
    }

    pub fn handle_join(&self, req: &JoinRequest) -> Result<AuthVerdict, ServiceError> {
        let session = self.join(req)?;
        Ok(AuthVerdict::from_decision(
            session.decision(),
            Some(session.session_id().to_string()),
        ))
    }

    /// Runs the pipeline and returns the stored session row.
    pub fn join(&self, req: &JoinRequest) -> Result<SessionRecord, ServiceError> {
        let serial = model::normalize_serial(&req.serial_raw).map_err(ServiceError::BadSerial)?;
        let identity = model::collate(&req.hostname, &req.ip, serial).map_err(ServiceError::BadIp)?;
        let ap = ApId::new(req.ap_id.clone());

        let mut state = self.lock();
        let view = state.registry.snapshot();
        let decision = model::decide_with_revocations(&identity, view.serials(), view.revoked());
        let now = self.clock.now();
        let session = state
            .sessions
            .record_attempt(identity, decision, ap.clone(), now, view.version())?;
        info!(
            serial = %session.serial(),
            hostname = session.identity().hostname(),
            ip = session.identity().ip(),
            ap = %ap,
            verdict = %decision.verdict(),
            "join"
        );
        state.emit(&ap, session.serial(), session.status(), Cause::Verdict);
        Ok(session)
    }

    pub fn handle_control(&self, cmd: &ControlCommand) -> Result<SessionRecord, ServiceError> {
        let serial = model::normalize_serial(&cmd.serial).map_err(ServiceError::BadSerial)?;
        self.set_status(&serial, cmd.action, &cmd.operator)
    }

    pub fn set_status(&self, serial: &CanonicalSerial, action: Action, operator: &str) -> Result<SessionRecord, ServiceError> {
        let mut state = self.lock();
        let view = state.registry.snapshot();
        let record = state.sessions.set_status(serial, action.target(), &view)?;
        info!(serial = %serial, ?action, operator, "operator control");
        state.emit(record.ap_id(), serial, record.status(), Cause::Operator);
        Ok(record)
    }

    /// Drops every live session and asks each dropped device to re-join.
    /// Returns how many sessions were dropped.
    pub fn rescan(&self) -> Result<usize, ServiceError> {
        let mut state = self.lock();
        let drained = state.sessions.drain()?;
        for record in &drained {
            state.emit(record.ap_id(), record.serial(), DeviceStatus::Disabled, Cause::Rescan);
        }
        info!(purged = drained.len(), "rescan");
        Ok(drained.len())
    }

    pub fn register(&self, serial: &str, label: &str) -> Result<RegistrationRecord, ServiceError> {
        let record = self.lock().registry.register(serial, label)?;
        info!(serial = %record.serial, label = %record.label, "registered");
        Ok(record)
    }

    /// Revokes a registration. A live session for the serial is denied and
    /// disabled on the spot.
    pub fn revoke(&self, serial: &str) -> Result<RegistrationRecord, ServiceError> {
        let serial = model::normalize_serial(serial).map_err(ServiceError::BadSerial)?;
        let mut state = self.lock();
        let before = state.registry.version();
        let record = state.registry.revoke(&serial)?;
        if state.registry.version() != before {
            let version = state.registry.version();
            if let Some(session) = state.sessions.revoke(&serial, version)? {
                state.emit(session.ap_id(), &serial, DeviceStatus::Disabled, Cause::Operator);
            }
            info!(serial = %serial, "revoked");
        }
        Ok(record)
    }

    pub fn snapshot(&self) -> RegistryView {
        self.lock().registry.snapshot()
    }

    pub fn list_registered(&self) -> Vec<RegistrationRecord> {
        self.lock().registry.records()
    }

    pub fn list_connected(&self) -> Vec<SessionRecord> {
        self.lock().sessions.list_connected()
    }

    pub fn session(&self, serial: &CanonicalSerial) -> Option<SessionRecord> {
        self.lock().sessions.get(serial).cloned()
    }

    pub fn compact_registry(&self) -> Result<(), ServiceError> {
        Ok(self.lock().registry.compact()?)
    }
}
