//! Pure domain types and the authentication decision.
//!
//! Nothing in this module touches the clock, the filesystem or the network.
//! A device is identified by its hardware serial number; hostname and IP
//! address travel alongside it for display but never influence a verdict.

use std::collections::BTreeSet;
use std::fmt;
use std::net::IpAddr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest accepted serial, in characters, after normalization.
pub const MAX_SERIAL_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("serial number is empty")]
    EmptySerial,
    #[error("serial number is {len} characters long, limit is {MAX_SERIAL_LEN}")]
    SerialTooLong { len: usize },
    #[error("invalid IP address {0:?}")]
    InvalidIp(String),
}

/// A serial number in canonical form: uppercase, trimmed, with every
/// internal whitespace run collapsed to a single space.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CanonicalSerial(String);

impl CanonicalSerial {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CanonicalSerial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for CanonicalSerial {
    type Error = ModelError;

    fn try_from(raw: String) -> Result<Self, Self::Error> {
        normalize_serial(&raw)
    }
}

impl TryFrom<&str> for CanonicalSerial {
    type Error = ModelError;

    fn try_from(raw: &str) -> Result<Self, Self::Error> {
        normalize_serial(raw)
    }
}

impl From<CanonicalSerial> for String {
    fn from(serial: CanonicalSerial) -> Self {
        serial.0
    }
}

impl AsRef<str> for CanonicalSerial {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

pub fn normalize_serial(raw: &str) -> Result<CanonicalSerial, ModelError> {
    let mut out = String::with_capacity(raw.len());
    for word in raw.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_uppercase));
    }
    if out.is_empty() {
        return Err(ModelError::EmptySerial);
    }
    let len = out.chars().count();
    if len > MAX_SERIAL_LEN {
        return Err(ModelError::SerialTooLong { len });
    }
    Ok(CanonicalSerial(out))
}

/// The collated (serial, hostname, IP) triple reported by a joining device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "IdentityFields")]
pub struct DeviceIdentity {
    serial: CanonicalSerial,
    hostname: String,
    ip: String,
}

#[derive(Deserialize)]
struct IdentityFields {
    serial: CanonicalSerial,
    hostname: String,
    ip: String,
}

impl TryFrom<IdentityFields> for DeviceIdentity {
    type Error = ModelError;

    fn try_from(f: IdentityFields) -> Result<Self, Self::Error> {
        collate(&f.hostname, &f.ip, f.serial)
    }
}

impl DeviceIdentity {
    pub fn serial(&self) -> &CanonicalSerial {
        &self.serial
    }

    pub fn hostname(&self) -> &str {
        &self.hostname
    }

    /// The address exactly as reported by the device.
    pub fn ip(&self) -> &str {
        &self.ip
    }

    pub fn ip_addr(&self) -> IpAddr {
        // Validated in `collate`.
        self.ip.parse().expect("validated IP address")
    }
}

/// Assembles an identity from its parts. Fields are kept as given; the IP
/// is only checked for syntax.
pub fn collate(hostname: &str, ip: &str, serial: CanonicalSerial) -> Result<DeviceIdentity, ModelError> {
    if ip.parse::<IpAddr>().is_err() {
        return Err(ModelError::InvalidIp(ip.to_owned()));
    }
    Ok(DeviceIdentity {
        serial,
        hostname: hostname.to_owned(),
        ip: ip.to_owned(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Allow,
    Deny,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Allow => "Allow",
            Verdict::Deny => "Deny",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DenyReason {
    #[serde(rename = "unregistered")]
    Unregistered,
    #[serde(rename = "registration-revoked")]
    RegistrationRevoked,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::Unregistered => "unregistered",
            DenyReason::RegistrationRevoked => "registration-revoked",
        }
    }
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Outcome of authenticating a join attempt. A denial always carries its
/// reason; an allow never does.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "DecisionFields", into = "DecisionFields")]
pub enum AuthDecision {
    Allow,
    Deny(DenyReason),
}

#[derive(Serialize, Deserialize)]
struct DecisionFields {
    verdict: Verdict,
    reason: Option<DenyReason>,
}

impl TryFrom<DecisionFields> for AuthDecision {
    type Error = &'static str;

    fn try_from(f: DecisionFields) -> Result<Self, Self::Error> {
        AuthDecision::from_parts(f.verdict, f.reason)
    }
}

impl From<AuthDecision> for DecisionFields {
    fn from(d: AuthDecision) -> Self {
        DecisionFields {
            verdict: d.verdict(),
            reason: d.reason(),
        }
    }
}

impl AuthDecision {
    pub fn verdict(&self) -> Verdict {
        match self {
            AuthDecision::Allow => Verdict::Allow,
            AuthDecision::Deny(_) => Verdict::Deny,
        }
    }

    pub fn reason(&self) -> Option<DenyReason> {
        match self {
            AuthDecision::Allow => None,
            AuthDecision::Deny(r) => Some(*r),
        }
    }

    pub fn is_allow(&self) -> bool {
        matches!(self, AuthDecision::Allow)
    }

    pub fn from_parts(verdict: Verdict, reason: Option<DenyReason>) -> Result<Self, &'static str> {
        match (verdict, reason) {
            (Verdict::Allow, None) => Ok(AuthDecision::Allow),
            (Verdict::Deny, Some(r)) => Ok(AuthDecision::Deny(r)),
            (Verdict::Allow, Some(_)) => Err("Allow must not carry a reason"),
            (Verdict::Deny, None) => Err("Deny requires a reason"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DeviceStatus {
    Enabled,
    Disabled,
}

impl fmt::Display for DeviceStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DeviceStatus::Enabled => "Enabled",
            DeviceStatus::Disabled => "Disabled",
        })
    }
}

/// Allow iff the identity's serial is in `allowlist`. Hostname and IP are
/// deliberately ignored.
pub fn decide(identity: &DeviceIdentity, allowlist: &BTreeSet<CanonicalSerial>) -> AuthDecision {
    if allowlist.contains(identity.serial()) {
        AuthDecision::Allow
    } else {
        AuthDecision::Deny(DenyReason::Unregistered)
    }
}

/// Same verdict as [`decide`], with the denial reason refined when the
/// serial was registered once and has since been revoked.
pub fn decide_with_revocations(
    identity: &DeviceIdentity,
    allowlist: &BTreeSet<CanonicalSerial>,
    revoked: &BTreeSet<CanonicalSerial>,
) -> AuthDecision {
    match decide(identity, allowlist) {
        AuthDecision::Deny(_) if revoked.contains(identity.serial()) => {
            AuthDecision::Deny(DenyReason::RegistrationRevoked)
        }
        d => d,
    }
}
