//! Wire format shared by agents, the server and the simulator.
//!
//! A frame is a 4-byte big-endian payload length followed by that many
//! bytes of compact UTF-8 JSON:
//!
//! ```text
//! {"v":1,"kind":"<Kind>","body":{...}}
//! ```
//!
//! Keys are always emitted in declaration order and without whitespace, so
//! `encode` is deterministic. `decode` only accepts frames in exactly that
//! form, which makes `encode(decode(b)) == b` hold for every frame that
//! decodes.

use std::io::{self, Read, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AuthDecision, DenyReason, DeviceStatus, Verdict};

pub const PROTOCOL_VERSION: u64 = 1;

/// Largest payload (the JSON after the length prefix), in bytes.
pub const MAX_PAYLOAD: usize = 64 * 1024;

const PREFIX_LEN: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("payload is {0} bytes, limit is {MAX_PAYLOAD}")]
    MessageTooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("declared payload of {0} bytes exceeds limit of {MAX_PAYLOAD}")]
    MessageTooLarge(usize),
    #[error("{0} unexpected bytes after frame")]
    TrailingBytes(usize),
    #[error("malformed JSON: {0}")]
    BadJson(String),
    #[error("unknown message kind {0:?}")]
    UnknownKind(String),
    #[error("unsupported protocol version {0}")]
    UnknownVersion(u64),
    #[error("invalid {kind} body: {detail}")]
    InvalidBody { kind: &'static str, detail: String },
    #[error("frame is not in canonical encoding")]
    NonCanonical,
}

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JoinRequest {
    pub serial_raw: String,
    pub hostname: String,
    pub ip: String,
    pub ap_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuthVerdict {
    pub verdict: Verdict,
    pub reason: Option<DenyReason>,
    pub session_id: Option<String>,
}

impl AuthVerdict {
    pub fn from_decision(decision: AuthDecision, session_id: Option<String>) -> Self {
        AuthVerdict {
            verdict: decision.verdict(),
            reason: decision.reason(),
            session_id,
        }
    }

    pub fn decision(&self) -> Option<AuthDecision> {
        AuthDecision::from_parts(self.verdict, self.reason).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Enable,
    Disable,
}

impl Action {
    pub fn target(self) -> DeviceStatus {
        match self {
            Action::Enable => DeviceStatus::Enabled,
            Action::Disable => DeviceStatus::Disabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlCommand {
    pub serial: String,
    pub action: Action,
    pub operator: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    Verdict,
    Operator,
    Rescan,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusEvent {
    pub serial: String,
    pub status: DeviceStatus,
    pub cause: Cause,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorBody {
    pub reason: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProtocolMessage {
    JoinRequest(JoinRequest),
    AuthVerdict(AuthVerdict),
    ControlCommand(ControlCommand),
    StatusEvent(StatusEvent),
    Error(ErrorBody),
}

impl ProtocolMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            ProtocolMessage::JoinRequest(_) => "JoinRequest",
            ProtocolMessage::AuthVerdict(_) => "AuthVerdict",
            ProtocolMessage::ControlCommand(_) => "ControlCommand",
            ProtocolMessage::StatusEvent(_) => "StatusEvent",
            ProtocolMessage::Error(_) => "Error",
        }
    }

    fn validate(&self) -> Result<(), String> {
        match self {
            ProtocolMessage::JoinRequest(j) if j.serial_raw.is_empty() => Err("serial_raw is empty".into()),
            ProtocolMessage::AuthVerdict(v) => {
                AuthDecision::from_parts(v.verdict, v.reason).map(|_| ()).map_err(str::to_owned)
            }
            _ => Ok(()),
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T> {
    v: u64,
    kind: &'a str,
    body: &'a T,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEnvelope {
    v: u64,
    kind: String,
    body: serde_json::Value,
}

fn payload_of(msg: &ProtocolMessage) -> Vec<u8> {
    fn env<T: Serialize>(kind: &str, body: &T) -> Vec<u8> {
        serde_json::to_vec(&Envelope {
            v: PROTOCOL_VERSION,
            kind,
            body,
        })
        .expect("protocol bodies serialize")
    }
    let kind = msg.kind();
    match msg {
        ProtocolMessage::JoinRequest(b) => env(kind, b),
        ProtocolMessage::AuthVerdict(b) => env(kind, b),
        ProtocolMessage::ControlCommand(b) => env(kind, b),
        ProtocolMessage::StatusEvent(b) => env(kind, b),
        ProtocolMessage::Error(b) => env(kind, b),
    }
}

pub fn encode(msg: &ProtocolMessage) -> Result<Vec<u8>, EncodeError> {
    let payload = payload_of(msg);
    if payload.len() > MAX_PAYLOAD {
        return Err(EncodeError::MessageTooLarge(payload.len()));
    }
    let mut frame = Vec::with_capacity(PREFIX_LEN + payload.len());
    frame.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

/// Reads the length prefix. Returns the payload length once four bytes
/// are available.
pub fn payload_len(prefix: [u8; 4]) -> Result<usize, DecodeError> {
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_PAYLOAD {
        return Err(DecodeError::MessageTooLarge(len));
    }
    Ok(len)
}

/// Decodes exactly one frame.
pub fn decode(bytes: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    if bytes.len() < PREFIX_LEN {
        return Err(DecodeError::Truncated {
            needed: PREFIX_LEN,
            have: bytes.len(),
        });
    }
    let len = payload_len(bytes[..PREFIX_LEN].try_into().unwrap())?;
    let have = bytes.len() - PREFIX_LEN;
    if have < len {
        return Err(DecodeError::Truncated {
            needed: PREFIX_LEN + len,
            have: bytes.len(),
        });
    }
    if have > len {
        return Err(DecodeError::TrailingBytes(have - len));
    }
    decode_payload(&bytes[PREFIX_LEN..])
}

/// Decodes a payload whose length prefix has already been consumed.
pub fn decode_payload(payload: &[u8]) -> Result<ProtocolMessage, DecodeError> {
    let raw: RawEnvelope = serde_json::from_slice(payload).map_err(|e| DecodeError::BadJson(e.to_string()))?;
    if raw.v != PROTOCOL_VERSION {
        return Err(DecodeError::UnknownVersion(raw.v));
    }
    fn body<T: DeserializeOwned>(kind: &'static str, v: serde_json::Value) -> Result<T, DecodeError> {
        serde_json::from_value(v).map_err(|e| DecodeError::InvalidBody {
            kind,
            detail: e.to_string(),
        })
    }
    let msg = match raw.kind.as_str() {
        "JoinRequest" => ProtocolMessage::JoinRequest(body("JoinRequest", raw.body)?),
        "AuthVerdict" => ProtocolMessage::AuthVerdict(body("AuthVerdict", raw.body)?),
        "ControlCommand" => ProtocolMessage::ControlCommand(body("ControlCommand", raw.body)?),
        "StatusEvent" => ProtocolMessage::StatusEvent(body("StatusEvent", raw.body)?),
        "Error" => ProtocolMessage::Error(body("Error", raw.body)?),
        _ => return Err(DecodeError::UnknownKind(raw.kind)),
    };
    msg.validate().map_err(|detail| DecodeError::InvalidBody {
        kind: msg.kind(),
        detail,
    })?;
    if payload_of(&msg) != payload {
        return Err(DecodeError::NonCanonical);
    }
    Ok(msg)
}

pub fn write_message<W: Write>(w: &mut W, msg: &ProtocolMessage) -> Result<(), FrameError> {
    let frame = encode(msg)?;
    w.write_all(&frame)?;
    w.flush()?;
    Ok(())
}

/// Blocking read of one frame from a stream.
pub fn read_message<R: Read>(r: &mut R) -> Result<ProtocolMessage, FrameError> {
    let mut prefix = [0u8; PREFIX_LEN];
    r.read_exact(&mut prefix)?;
    let len = payload_len(prefix)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(decode_payload(&payload)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn join() -> ProtocolMessage {
        ProtocolMessage::JoinRequest(JoinRequest {
            serial_raw: "SN-1".into(),
            hostname: "H".into(),
            ip: "10.0.0.2".into(),
            ap_id: "ap0".into(),
        })
    }

    fn frame(json: &str) -> Vec<u8> {
        let mut f = (json.len() as u32).to_be_bytes().to_vec();
        f.extend_from_slice(json.as_bytes());
        f
    }

    #[test]
    fn join_request_golden_frame() {
        let bytes = encode(&join()).unwrap();
        let json = r#"{"v":1,"kind":"JoinRequest","body":{"serial_raw":"SN-1","hostname":"H","ip":"10.0.0.2","ap_id":"ap0"}}"#;
        assert_eq!(bytes, frame(json));
        assert_eq!(u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize, bytes.len() - 4);
        assert_eq!(decode(&bytes).unwrap(), join());
    }

    #[test]
    fn other_golden_bodies() {
        let cases = [
            (
                ProtocolMessage::AuthVerdict(AuthVerdict {
                    verdict: Verdict::Deny,
                    reason: Some(DenyReason::Unregistered),
                    session_id: Some("s-000003".into()),
                }),
                r#"{"v":1,"kind":"AuthVerdict","body":{"verdict":"Deny","reason":"unregistered","session_id":"s-000003"}}"#,
            ),
            (
                ProtocolMessage::ControlCommand(ControlCommand {
                    serial: "SN-RAFIKI".into(),
                    action: Action::Disable,
                    operator: "admin".into(),
                }),
                r#"{"v":1,"kind":"ControlCommand","body":{"serial":"SN-RAFIKI","action":"Disable","operator":"admin"}}"#,
            ),
            (
                ProtocolMessage::StatusEvent(StatusEvent {
                    serial: "SN-RAFIKI".into(),
                    status: DeviceStatus::Disabled,
                    cause: Cause::Operator,
                }),
                r#"{"v":1,"kind":"StatusEvent","body":{"serial":"SN-RAFIKI","status":"Disabled","cause":"operator"}}"#,
            ),
            (
                ProtocolMessage::Error(ErrorBody {
                    reason: "bad-serial".into(),
                    detail: "serial number is empty".into(),
                }),
                r#"{"v":1,"kind":"Error","body":{"reason":"bad-serial","detail":"serial number is empty"}}"#,
            ),
        ];
        for (msg, json) in cases {
            assert_eq!(encode(&msg).unwrap(), frame(json), "{json}");
            assert_eq!(decode(&frame(json)).unwrap(), msg);
        }
    }

    #[test]
    fn oversized_body_is_refused() {
        let msg = ProtocolMessage::Error(ErrorBody {
            reason: "x".into(),
            detail: "y".repeat(65 * 1024),
        });
        assert!(matches!(encode(&msg), Err(EncodeError::MessageTooLarge(_))));

        let mut bytes = ((MAX_PAYLOAD + 1) as u32).to_be_bytes().to_vec();
        bytes.extend(std::iter::repeat_n(b' ', MAX_PAYLOAD + 1));
        assert_eq!(decode(&bytes), Err(DecodeError::MessageTooLarge(MAX_PAYLOAD + 1)));
    }

    #[test]
    fn short_input_is_truncated() {
        assert!(matches!(decode(&[0, 0, 1]), Err(DecodeError::Truncated { .. })));
        let mut bytes = encode(&join()).unwrap();
        bytes.pop();
        assert!(matches!(decode(&bytes), Err(DecodeError::Truncated { .. })));
    }

    #[test]
    fn unknown_kind_and_version() {
        let bogus = frame(r#"{"v":1,"kind":"Bogus","body":{}}"#);
        assert_eq!(decode(&bogus), Err(DecodeError::UnknownKind("Bogus".into())));
        let v2 = frame(r#"{"v":2,"kind":"JoinRequest","body":{}}"#);
        assert_eq!(decode(&v2), Err(DecodeError::UnknownVersion(2)));
        let v0 = frame(r#"{"v":0,"kind":"Bogus","body":{}}"#);
        assert_eq!(decode(&v0), Err(DecodeError::UnknownVersion(0)));
    }

    #[test]
    fn rejects_shape_violations() {
        let allow_with_reason =
            frame(r#"{"v":1,"kind":"AuthVerdict","body":{"verdict":"Allow","reason":"unregistered","session_id":null}}"#);
        assert!(matches!(decode(&allow_with_reason), Err(DecodeError::InvalidBody { .. })));
        let empty_serial =
            frame(r#"{"v":1,"kind":"JoinRequest","body":{"serial_raw":"","hostname":"","ip":"","ap_id":""}}"#);
        assert!(matches!(decode(&empty_serial), Err(DecodeError::InvalidBody { .. })));
        let extra_field = frame(r#"{"v":1,"kind":"Error","body":{"reason":"a","detail":"b","x":1}}"#);
        assert!(matches!(decode(&extra_field), Err(DecodeError::InvalidBody { .. })));
    }

    #[test]
    fn rejects_non_canonical_spelling() {
        let spaced = frame(r#"{"v": 1, "kind": "Error", "body": {"reason": "a", "detail": "b"}}"#);
        assert_eq!(decode(&spaced), Err(DecodeError::NonCanonical));
        let reordered = frame(r#"{"kind":"Error","v":1,"body":{"reason":"a","detail":"b"}}"#);
        assert_eq!(decode(&reordered), Err(DecodeError::NonCanonical));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&join()).unwrap();
        bytes.push(0);
        assert_eq!(decode(&bytes), Err(DecodeError::TrailingBytes(1)));
    }

    #[test]
    fn stream_helpers() {
        let mut buf = Vec::new();
        write_message(&mut buf, &join()).unwrap();
        write_message(&mut buf, &ProtocolMessage::Error(ErrorBody { reason: "r".into(), detail: "d".into() })).unwrap();
        let mut cur = io::Cursor::new(buf);
        assert_eq!(read_message(&mut cur).unwrap(), join());
        assert!(matches!(read_message(&mut cur).unwrap(), ProtocolMessage::Error(_)));
        assert!(matches!(read_message(&mut cur), Err(FrameError::Io(_))));
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = decode(&bytes);
        }

        #[test]
        fn framed_garbage_never_panics(payload in "\\PC{0,200}") {
            let _ = decode(&frame(&payload));
        }

        #[test]
        fn round_trip_status_events(serial in "\\PC{0,30}", enabled: bool, cause in 0u8..3) {
            let msg = ProtocolMessage::StatusEvent(StatusEvent {
                serial,
                status: if enabled { DeviceStatus::Enabled } else { DeviceStatus::Disabled },
                cause: [Cause::Verdict, Cause::Operator, Cause::Rescan][cause as usize],
            });
            let bytes = encode(&msg).unwrap();
            prop_assert_eq!(decode(&bytes).unwrap(), msg);
            prop_assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
        }
    }
}
