//! The live connected-devices table.
//!
//! Every join attempt lands here, allowed or not. A denied device is kept
//! with status `Disabled` so operators can see it. There is at most one
//! row per serial; a re-join replaces the previous row.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AuthDecision, CanonicalSerial, DenyReason, DeviceIdentity, DeviceStatus};
use crate::registry::RegistryView;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("no live session for {0}")]
    NoSuchSession(CanonicalSerial),
    #[error("{0} is not registered; register this device first")]
    CannotEnableDenied(CanonicalSerial),
    #[error("session store {}: {source}", path.display())]
    StorageFailure { path: PathBuf, source: io::Error },
    #[error("session store {}: {detail}", path.display())]
    CorruptStore { path: PathBuf, detail: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SessionId(String);

impl SessionId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SessionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ApId(String);

impl ApId {
    pub fn new(id: impl Into<String>) -> Self {
        ApId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ApId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ApId {
    fn from(s: &str) -> Self {
        ApId(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "SessionFields", into = "SessionFields")]
pub struct SessionRecord {
    session_id: SessionId,
    identity: DeviceIdentity,
    decision: AuthDecision,
    status: DeviceStatus,
    ap_id: ApId,
    connected_at: DateTime<Utc>,
    registry_version: u64,
}

/// Flat JSON shape of a session, as served by the admin API.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SessionFields {
    session_id: SessionId,
    serial: CanonicalSerial,
    hostname: String,
    ip: String,
    ap_id: ApId,
    verdict: crate::model::Verdict,
    reason: Option<DenyReason>,
    status: DeviceStatus,
    connected_at: DateTime<Utc>,
    registry_version: u64,
}

impl From<SessionRecord> for SessionFields {
    fn from(r: SessionRecord) -> Self {
        SessionFields {
            session_id: r.session_id,
            serial: r.identity.serial().clone(),
            hostname: r.identity.hostname().to_owned(),
            ip: r.identity.ip().to_owned(),
            ap_id: r.ap_id,
            verdict: r.decision.verdict(),
            reason: r.decision.reason(),
            status: r.status,
            connected_at: r.connected_at,
            registry_version: r.registry_version,
        }
    }
}

impl TryFrom<SessionFields> for SessionRecord {
    type Error = String;

    fn try_from(f: SessionFields) -> Result<Self, Self::Error> {
        let identity = crate::model::collate(&f.hostname, &f.ip, f.serial).map_err(|e| e.to_string())?;
        let decision = AuthDecision::from_parts(f.verdict, f.reason)?;
        if !decision.is_allow() && f.status == DeviceStatus::Enabled {
            return Err("denied session cannot be Enabled".into());
        }
        Ok(SessionRecord {
            session_id: f.session_id,
            identity,
            decision,
            status: f.status,
            ap_id: f.ap_id,
            connected_at: f.connected_at,
            registry_version: f.registry_version,
        })
    }
}

impl SessionRecord {
    pub fn session_id(&self) -> &SessionId {
        &self.session_id
    }

    pub fn identity(&self) -> &DeviceIdentity {
        &self.identity
    }

    pub fn serial(&self) -> &CanonicalSerial {
        self.identity.serial()
    }

    pub fn decision(&self) -> AuthDecision {
        self.decision
    }

    pub fn status(&self) -> DeviceStatus {
        self.status
    }

    pub fn ap_id(&self) -> &ApId {
        &self.ap_id
    }

    pub fn connected_at(&self) -> DateTime<Utc> {
        self.connected_at
    }

    /// Registry version the decision was taken against.
    pub fn registry_version(&self) -> u64 {
        self.registry_version
    }
}

#[derive(Debug, Default)]
pub struct SessionTable {
    live: BTreeMap<CanonicalSerial, SessionRecord>,
    next_id: u64,
    store: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
struct StoredTable {
    next_id: u64,
    sessions: Vec<SessionRecord>,
}

impl SessionTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// A table mirrored to a JSON file, rewritten atomically on every
    /// mutation. A missing file yields an empty table.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, SessionError> {
        let path = path.as_ref().to_owned();
        let mut table = SessionTable {
            store: Some(path.clone()),
            ..Self::default()
        };
        match fs::read(&path) {
            Ok(bytes) => {
                let stored: StoredTable = serde_json::from_slice(&bytes).map_err(|e| SessionError::CorruptStore {
                    path: path.clone(),
                    detail: e.to_string(),
                })?;
                table.next_id = stored.next_id;
                for rec in stored.sessions {
                    table.live.insert(rec.serial().clone(), rec);
                }
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => {}
            Err(source) => return Err(SessionError::StorageFailure { path, source }),
        }
        Ok(table)
    }

    fn save(&self) -> Result<(), SessionError> {
        let Some(path) = &self.store else { return Ok(()) };
        let storage = |source| SessionError::StorageFailure {
            path: path.clone(),
            source,
        };
        let stored = StoredTable {
            next_id: self.next_id,
            sessions: self.list_connected(),
        };
        let tmp = path.with_extension("json.tmp");
        let mut f = fs::File::create(&tmp).map_err(storage)?;
        f.write_all(&serde_json::to_vec_pretty(&stored).expect("sessions serialize")).map_err(storage)?;
        f.sync_data().map_err(storage)?;
        fs::rename(&tmp, path).map_err(storage)
    }

    pub fn len(&self) -> usize {
        self.live.len()
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }

    pub fn get(&self, serial: &CanonicalSerial) -> Option<&SessionRecord> {
        self.live.get(serial)
    }

    /// Empties the table and returns how many rows were dropped.
    pub fn purge_all(&mut self) -> Result<usize, SessionError> {
        Ok(self.drain()?.len())
    }

    /// Empties the table and returns the dropped rows in display order.
    pub fn drain(&mut self) -> Result<Vec<SessionRecord>, SessionError> {
        let drained = self.list_connected();
        self.live.clear();
        self.save()?;
        Ok(drained)
    }

    pub fn record_attempt(
        &mut self,
        identity: DeviceIdentity,
        decision: AuthDecision,
        ap_id: ApId,
        connected_at: DateTime<Utc>,
        registry_version: u64,
    ) -> Result<SessionRecord, SessionError> {
        self.next_id += 1;
        let status = if decision.is_allow() {
            DeviceStatus::Enabled
        } else {
            DeviceStatus::Disabled
        };
        let record = SessionRecord {
            session_id: SessionId(format!("s-{:06}", self.next_id)),
            identity,
            decision,
            status,
            ap_id,
            connected_at,
            registry_version,
        };
        self.live.insert(record.serial().clone(), record.clone());
        self.save()?;
        Ok(record)
    }

    /// Live rows ordered by `connected_at`, ties broken by serial.
    pub fn list_connected(&self) -> Vec<SessionRecord> {
        let mut rows: Vec<_> = self.live.values().cloned().collect();
        rows.sort_by(|a, b| a.connected_at.cmp(&b.connected_at).then_with(|| a.serial().cmp(b.serial())));
        rows
    }

    /// Operator control. Disabling always succeeds for a live row. Enabling
    /// requires the serial to be in `registry` right now; a row that was
    /// denied at join time is re-decided as allowed when it is.
    pub fn set_status(
        &mut self,
        serial: &CanonicalSerial,
        status: DeviceStatus,
        registry: &RegistryView,
    ) -> Result<SessionRecord, SessionError> {
        let record = self
            .live
            .get_mut(serial)
            .ok_or_else(|| SessionError::NoSuchSession(serial.clone()))?;
        match status {
            DeviceStatus::Disabled => record.status = DeviceStatus::Disabled,
            DeviceStatus::Enabled => {
                if !registry.contains(serial) {
                    return Err(SessionError::CannotEnableDenied(serial.clone()));
                }
                if !record.decision.is_allow() {
                    record.decision = AuthDecision::Allow;
                    record.registry_version = registry.version();
                }
                record.status = DeviceStatus::Enabled;
            }
        }
        let record = record.clone();
        self.save()?;
        Ok(record)
    }

    /// Applies a registry revocation to the live row, if any: the row
    /// becomes denied and disabled.
    pub fn revoke(&mut self, serial: &CanonicalSerial, registry_version: u64) -> Result<Option<SessionRecord>, SessionError> {
        let Some(record) = self.live.get_mut(serial) else { return Ok(None) };
        record.decision = AuthDecision::Deny(DenyReason::RegistrationRevoked);
        record.status = DeviceStatus::Disabled;
        record.registry_version = registry_version;
        let record = record.clone();
        self.save()?;
        Ok(Some(record))
    }
}
