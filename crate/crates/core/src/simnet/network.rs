use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::model::{CanonicalSerial, DeviceStatus};
use crate::protocol::StatusEvent;
use crate::session::ApId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetError {
    #[error("unknown access point {0}")]
    UnknownAp(ApId),
    #[error("{0} is not associated with any access point")]
    NotAssociated(CanonicalSerial),
    #[error("frame from {src} has seq {seq}, expected more than {last}")]
    StaleSequence { src: CanonicalSerial, seq: u64, last: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessPoint {
    id: ApId,
    associated: BTreeSet<CanonicalSerial>,
    gate: BTreeMap<CanonicalSerial, DeviceStatus>,
}

impl AccessPoint {
    fn new(id: ApId) -> Self {
        AccessPoint {
            id,
            associated: BTreeSet::new(),
            gate: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> &ApId {
        &self.id
    }

    pub fn associated(&self) -> &BTreeSet<CanonicalSerial> {
        &self.associated
    }

    pub fn gate(&self, serial: &CanonicalSerial) -> Option<DeviceStatus> {
        self.gate.get(serial).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Destination {
    Server,
    Peer(CanonicalSerial),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub src: CanonicalSerial,
    pub dst: Destination,
    pub payload: Vec<u8>,
    pub seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Delivery {
    Delivered,
    Blocked,
}

/// Access points and the devices attached to them. Traffic from a device
/// passes only while its gate at its current access point is `Enabled`.
#[derive(Debug, Default)]
pub struct Network {
    aps: BTreeMap<ApId, AccessPoint>,
    location: BTreeMap<CanonicalSerial, ApId>,
    last_seq: BTreeMap<CanonicalSerial, u64>,
}

impl Network {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_aps<I, S>(ids: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut net = Self::new();
        for id in ids {
            net.add_ap(ApId::new(id));
        }
        net
    }

    pub fn add_ap(&mut self, id: ApId) {
        self.aps.entry(id.clone()).or_insert_with(|| AccessPoint::new(id));
    }

    pub fn ap(&self, id: &ApId) -> Option<&AccessPoint> {
        self.aps.get(id)
    }

    pub fn aps(&self) -> impl Iterator<Item = &AccessPoint> {
        self.aps.values()
    }

    pub fn location(&self, serial: &CanonicalSerial) -> Option<&ApId> {
        self.location.get(serial)
    }

    /// Gate state for `serial` at its current access point.
    pub fn gate(&self, serial: &CanonicalSerial) -> Option<DeviceStatus> {
        let ap = self.location.get(serial)?;
        self.aps[ap].gate(serial)
    }

    /// Attaches `serial` to `ap`, detaching it from any previous one. The
    /// gate starts closed until a verdict arrives.
    pub fn associate(&mut self, ap: &ApId, serial: &CanonicalSerial) -> Result<(), NetError> {
        if !self.aps.contains_key(ap) {
            return Err(NetError::UnknownAp(ap.clone()));
        }
        if let Some(old) = self.location.remove(serial) {
            let old_ap = self.aps.get_mut(&old).expect("location points at a known AP");
            old_ap.associated.remove(serial);
            old_ap.gate.remove(serial);
        }
        let target = self.aps.get_mut(ap).expect("checked above");
        target.associated.insert(serial.clone());
        target.gate.insert(serial.clone(), DeviceStatus::Disabled);
        self.location.insert(serial.clone(), ap.clone());
        Ok(())
    }

    /// Updates the gate for the event's serial. Events for unknown devices,
    /// or addressed to an AP the device has since left, are dropped.
    pub fn apply_status(&mut self, ap: Option<&ApId>, event: &StatusEvent) {
        let Ok(serial) = CanonicalSerial::try_from(event.serial.as_str()) else {
            warn!(serial = %event.serial, "status event with malformed serial ignored");
            return;
        };
        let Some(current) = self.location.get(&serial) else {
            warn!(serial = %serial, "status event for unassociated device ignored");
            return;
        };
        if ap.is_some_and(|ap| ap != current) {
            warn!(serial = %serial, "status event for a previous association ignored");
            return;
        }
        let current = current.clone();
        self.aps
            .get_mut(&current)
            .expect("location points at a known AP")
            .gate
            .insert(serial, event.status);
    }

    /// Builds the next frame for `src`, numbering it after the last one.
    pub fn frame(&self, src: &CanonicalSerial, dst: Destination, payload: Vec<u8>) -> Frame {
        Frame {
            src: src.clone(),
            dst,
            payload,
            seq: self.last_seq.get(src).map_or(1, |s| s + 1),
        }
    }

    pub fn deliver(&mut self, frame: &Frame) -> Result<Delivery, NetError> {
        let Some(ap) = self.location.get(&frame.src) else {
            return Err(NetError::NotAssociated(frame.src.clone()));
        };
        if let Some(&last) = self.last_seq.get(&frame.src) {
            if frame.seq <= last {
                return Err(NetError::StaleSequence {
                    src: frame.src.clone(),
                    seq: frame.seq,
                    last,
                });
            }
        }
        let open = self.aps[ap].gate(&frame.src) == Some(DeviceStatus::Enabled);
        self.last_seq.insert(frame.src.clone(), frame.seq);
        Ok(if open { Delivery::Delivered } else { Delivery::Blocked })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::normalize_serial;
    use crate::protocol::Cause;

    fn s(x: &str) -> CanonicalSerial {
        normalize_serial(x).unwrap()
    }

    fn ev(serial: &str, status: DeviceStatus) -> StatusEvent {
        StatusEvent {
            serial: serial.into(),
            status,
            cause: Cause::Verdict,
        }
    }

    fn send(net: &mut Network, serial: &str) -> Delivery {
        let f = net.frame(&s(serial), Destination::Server, b"ping".to_vec());
        net.deliver(&f).unwrap()
    }

    #[test]
    fn default_deny_before_verdict() {
        let mut net = Network::with_aps(["ap-1"]);
        net.associate(&"ap-1".into(), &s("SN-A")).unwrap();
        assert_eq!(send(&mut net, "SN-A"), Delivery::Blocked);
        net.apply_status(None, &ev("SN-A", DeviceStatus::Enabled));
        assert_eq!(send(&mut net, "SN-A"), Delivery::Delivered);
        net.apply_status(None, &ev("SN-A", DeviceStatus::Disabled));
        assert_eq!(send(&mut net, "SN-A"), Delivery::Blocked);
    }

    #[test]
    fn only_latest_association_is_live() {
        let mut net = Network::with_aps(["ap-1", "ap-2"]);
        let a = s("SN-A");
        net.associate(&"ap-1".into(), &a).unwrap();
        net.apply_status(Some(&"ap-1".into()), &ev("SN-A", DeviceStatus::Enabled));
        assert_eq!(send(&mut net, "SN-A"), Delivery::Delivered);

        net.associate(&"ap-2".into(), &a).unwrap();
        assert!(net.ap(&"ap-1".into()).unwrap().associated().is_empty());
        assert_eq!(net.location(&a).unwrap().as_str(), "ap-2");
        // Roaming resets the gate.
        assert_eq!(send(&mut net, "SN-A"), Delivery::Blocked);
        // A late event addressed to the old AP changes nothing.
        net.apply_status(Some(&"ap-1".into()), &ev("SN-A", DeviceStatus::Enabled));
        assert_eq!(send(&mut net, "SN-A"), Delivery::Blocked);
        net.apply_status(Some(&"ap-2".into()), &ev("SN-A", DeviceStatus::Enabled));
        assert_eq!(send(&mut net, "SN-A"), Delivery::Delivered);
    }

    #[test]
    fn errors() {
        let mut net = Network::with_aps(["ap-1"]);
        assert_eq!(
            net.associate(&"ap-9".into(), &s("SN-A")),
            Err(NetError::UnknownAp("ap-9".into()))
        );
        let f = net.frame(&s("SN-A"), Destination::Server, vec![]);
        assert_eq!(net.deliver(&f), Err(NetError::NotAssociated(s("SN-A"))));

        net.associate(&"ap-1".into(), &s("SN-A")).unwrap();
        let f = net.frame(&s("SN-A"), Destination::Peer(s("SN-B")), vec![]);
        net.deliver(&f).unwrap();
        assert!(matches!(net.deliver(&f), Err(NetError::StaleSequence { .. })));
    }

    #[test]
    fn unknown_serial_event_is_noop() {
        let mut net = Network::with_aps(["ap-1"]);
        net.apply_status(None, &ev("SN-GHOST", DeviceStatus::Enabled));
        assert!(net.gate(&s("SN-GHOST")).is_none());
        net.apply_status(None, &ev("   ", DeviceStatus::Enabled));
    }
}
