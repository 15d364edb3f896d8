//! The allowlist of registered devices.
//!
//! Records live in memory and, when the registry is file-backed, in an
//! append-only JSON-lines log: one object per line with the fields
//! `serial`, `label`, `registered_at` and `revoked`, LF-terminated. Every
//! mutation appends the full new state of one record and is synced before
//! the call returns. Loading replays the log; the last line for a serial
//! wins. [`Registry::compact`] rewrites the log to one line per serial.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::model::{normalize_serial, CanonicalSerial, ModelError};

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error(transparent)]
    InvalidSerial(#[from] ModelError),
    #[error("{0} is not registered")]
    NotRegistered(CanonicalSerial),
    #[error("storage failure on {}: {source}", path.display())]
    StorageFailure { path: PathBuf, source: io::Error },
    #[error("{}: line {line}: corrupt registry record: {detail}", path.display())]
    CorruptStore { path: PathBuf, line: usize, detail: String },
}

/// One row of the registered-devices table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationRecord {
    pub serial: CanonicalSerial,
    pub label: String,
    #[serde(with = "utc_seconds")]
    pub registered_at: DateTime<Utc>,
    pub revoked: bool,
}

/// ISO-8601 UTC with whole seconds, e.g. `2024-01-01T00:00:00Z`.
pub mod utc_seconds {
    use chrono::{DateTime, NaiveDateTime, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    const FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

    pub fn serialize<S: Serializer>(t: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(&t.format(FORMAT))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        NaiveDateTime::parse_from_str(&raw, FORMAT)
            .map(|n| n.and_utc())
            .map_err(serde::de::Error::custom)
    }
}

/// An immutable point-in-time view of the allowlist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryView {
    serials: Arc<BTreeSet<CanonicalSerial>>,
    revoked: Arc<BTreeSet<CanonicalSerial>>,
    version: u64,
}

impl RegistryView {
    fn empty() -> Self {
        RegistryView {
            serials: Arc::default(),
            revoked: Arc::default(),
            version: 0,
        }
    }

    /// Registered, non-revoked serials.
    pub fn serials(&self) -> &BTreeSet<CanonicalSerial> {
        &self.serials
    }

    /// Serials that were registered and later revoked.
    pub fn revoked(&self) -> &BTreeSet<CanonicalSerial> {
        &self.revoked
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn contains(&self, serial: &CanonicalSerial) -> bool {
        self.serials.contains(serial)
    }

    pub fn len(&self) -> usize {
        self.serials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.serials.is_empty()
    }
}

struct AppendLog {
    path: PathBuf,
    file: File,
    len: u64,
}

impl AppendLog {
    fn open(path: &Path) -> io::Result<Self> {
        let existed = path.exists();
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if !existed {
            file.sync_all()?;
            sync_parent(path)?;
        }
        let len = file.metadata()?.len();
        Ok(AppendLog {
            path: path.to_owned(),
            file,
            len,
        })
    }

    fn append(&mut self, line: &[u8]) -> io::Result<()> {
        let res = self.file.write_all(line).and_then(|()| self.file.sync_data());
        match res {
            Ok(()) => {
                self.len += line.len() as u64;
                Ok(())
            }
            Err(e) => {
                // Drop any partial line so the log stays loadable.
                let _ = self.file.set_len(self.len);
                Err(e)
            }
        }
    }
}

fn sync_parent(path: &Path) -> io::Result<()> {
    #[cfg(unix)]
    if let Some(parent) = path.parent() {
        let dir = if parent.as_os_str().is_empty() { Path::new(".") } else { parent };
        File::open(dir)?.sync_all()?;
    }
    #[cfg(not(unix))]
    let _ = path;
    Ok(())
}

pub struct Registry {
    records: BTreeMap<CanonicalSerial, RegistrationRecord>,
    version: u64,
    view: RegistryView,
    log: Option<AppendLog>,
    clock: Arc<dyn Clock>,
}

impl std::fmt::Debug for Registry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Registry")
            .field("records", &self.records.len())
            .field("version", &self.version)
            .field("path", &self.path())
            .finish()
    }
}

impl Registry {
    /// A registry with no backing file.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Registry {
            records: BTreeMap::new(),
            version: 0,
            view: RegistryView::empty(),
            log: None,
            clock,
        }
    }

    /// Loads the log at `path`, creating it if missing. The loaded version
    /// equals the number of log lines replayed.
    pub fn load(path: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Self, RegistryError> {
        let path = path.as_ref();
        let storage = |source| RegistryError::StorageFailure {
            path: path.to_owned(),
            source,
        };
        let (records, version) = match fs::read(path) {
            Ok(bytes) => replay(path, &bytes)?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => (BTreeMap::new(), 0),
            Err(e) => return Err(storage(e)),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(storage)?;
        }
        let log = AppendLog::open(path).map_err(storage)?;
        let mut reg = Registry {
            records,
            version,
            view: RegistryView::empty(),
            log: Some(log),
            clock,
        };
        reg.rebuild_view();
        Ok(reg)
    }

    pub fn path(&self) -> Option<&Path> {
        self.log.as_ref().map(|l| l.path.as_path())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, serial: &CanonicalSerial) -> Option<&RegistrationRecord> {
        self.records.get(serial)
    }

    /// All records, oldest registration first.
    pub fn records(&self) -> Vec<RegistrationRecord> {
        let mut out: Vec<_> = self.records.values().cloned().collect();
        out.sort_by(|a, b| a.registered_at.cmp(&b.registered_at).then_with(|| a.serial.cmp(&b.serial)));
        out
    }

    pub fn snapshot(&self) -> RegistryView {
        self.view.clone()
    }

    /// Registers `serial`. Re-registering an active serial returns the
    /// existing record untouched; re-registering a revoked one reinstates
    /// it with its original label and timestamp.
    pub fn register(&mut self, serial: &str, label: &str) -> Result<RegistrationRecord, RegistryError> {
        let serial = normalize_serial(serial)?;
        let record = match self.records.get(&serial) {
            Some(existing) if !existing.revoked => return Ok(existing.clone()),
            Some(existing) => RegistrationRecord {
                revoked: false,
                ..existing.clone()
            },
            None => RegistrationRecord {
                serial,
                label: label.to_owned(),
                registered_at: self.clock.now().trunc_subsecs(0),
                revoked: false,
            },
        };
        self.commit(record)
    }

    /// Marks `serial` revoked. Revoking an already revoked serial is a no-op.
    pub fn revoke(&mut self, serial: &CanonicalSerial) -> Result<RegistrationRecord, RegistryError> {
        let record = match self.records.get(serial) {
            None => return Err(RegistryError::NotRegistered(serial.clone())),
            Some(existing) if existing.revoked => return Ok(existing.clone()),
            Some(existing) => RegistrationRecord {
                revoked: true,
                ..existing.clone()
            },
        };
        self.commit(record)
    }

    fn commit(&mut self, record: RegistrationRecord) -> Result<RegistrationRecord, RegistryError> {
        if let Some(log) = &mut self.log {
            let line = encode_line(&record);
            log.append(&line).map_err(|source| RegistryError::StorageFailure {
                path: log.path.clone(),
                source,
            })?;
        }
        self.records.insert(record.serial.clone(), record.clone());
        self.version += 1;
        self.rebuild_view();
        Ok(record)
    }

    /// Rewrites the log to hold exactly one line per serial.
    pub fn compact(&mut self) -> Result<(), RegistryError> {
        let Some(log) = &self.log else { return Ok(()) };
        let path = log.path.clone();
        let storage = |source| RegistryError::StorageFailure {
            path: path.clone(),
            source,
        };
        let tmp = path.with_extension("jsonl.compact");
        {
            let mut f = File::create(&tmp).map_err(storage)?;
            for record in self.records() {
                f.write_all(&encode_line(&record)).map_err(storage)?;
            }
            f.sync_all().map_err(storage)?;
        }
        fs::rename(&tmp, &path).map_err(storage)?;
        sync_parent(&path).map_err(storage)?;
        self.log = Some(AppendLog::open(&path).map_err(storage)?);
        Ok(())
    }

    fn rebuild_view(&mut self) {
        let (revoked, active): (Vec<_>, Vec<_>) = self.records.values().partition(|r| r.revoked);
        self.view = RegistryView {
            serials: Arc::new(active.into_iter().map(|r| r.serial.clone()).collect()),
            revoked: Arc::new(revoked.into_iter().map(|r| r.serial.clone()).collect()),
            version: self.version,
        };
    }
}

fn encode_line(record: &RegistrationRecord) -> Vec<u8> {
    let mut line = serde_json::to_vec(record).expect("registration record serializes");
    line.push(b'\n');
    line
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LogLine {
    serial: String,
    label: String,
    #[serde(with = "utc_seconds")]
    registered_at: DateTime<Utc>,
    revoked: bool,
}

type Replayed = (BTreeMap<CanonicalSerial, RegistrationRecord>, u64);

fn replay(path: &Path, bytes: &[u8]) -> Result<Replayed, RegistryError> {
    let corrupt = |line: usize, detail: String| RegistryError::CorruptStore {
        path: path.to_owned(),
        line,
        detail,
    };
    let mut records: BTreeMap<CanonicalSerial, RegistrationRecord> = BTreeMap::new();
    let mut version = 0;
    let mut rest = bytes;
    let mut line_no = 0;
    while !rest.is_empty() {
        line_no += 1;
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return Err(corrupt(line_no, "record is not LF-terminated (truncated write?)".into()));
        };
        let (line, tail) = (&rest[..end], &rest[end + 1..]);
        rest = tail;
        let text = std::str::from_utf8(line).map_err(|e| corrupt(line_no, format!("invalid UTF-8: {e}")))?;
        let raw: LogLine = serde_json::from_str(text).map_err(|e| corrupt(line_no, e.to_string()))?;
        let serial = match normalize_serial(&raw.serial) {
            Ok(s) if s.as_str() == raw.serial => s,
            Ok(_) => return Err(corrupt(line_no, "serial is not in canonical form".into())),
            Err(e) => return Err(corrupt(line_no, e.to_string())),
        };
        let record = RegistrationRecord {
            serial,
            label: raw.label,
            registered_at: raw.registered_at,
            revoked: raw.revoked,
        };
        if let Some(prev) = records.get(&record.serial) {
            if prev.registered_at != record.registered_at {
                return Err(corrupt(line_no, format!("registered_at changed for {}", record.serial)));
            }
        }
        records.insert(record.serial.clone(), record);
        version += 1;
    }
    Ok((records, version))
}
