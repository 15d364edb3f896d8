//! Blocking client for the admin HTTP API.

use reqwest::blocking::{Client, Response};
use reqwest::{Method, StatusCode};
use serde_json::Value;
use snap_core::protocol::ErrorBody;

pub const DEFAULT_ADMIN_URL: &str = "http://127.0.0.1:7402";

#[derive(Debug)]
pub enum ClientError {
    /// The server answered with an error status.
    Api { status: StatusCode, body: ErrorBody },
    /// The server could not be reached or sent something unreadable.
    Transport(String),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Api { body, .. } => f.write_str(&body.detail),
            ClientError::Transport(msg) => f.write_str(msg),
        }
    }
}

impl std::error::Error for ClientError {}

pub struct AdminClient {
    base: String,
    http: Client,
}

/// Percent-encodes a serial for use as one path segment.
fn segment(serial: &str) -> String {
    let mut out = String::new();
    for b in serial.bytes() {
        if b.is_ascii_alphanumeric() || b"-._~".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

impl AdminClient {
    pub fn new(base: &str) -> Self {
        AdminClient {
            base: base.trim_end_matches('/').to_owned(),
            http: Client::new(),
        }
    }

    fn call(&self, method: Method, path: &str, body: Option<&Value>) -> Result<Value, ClientError> {
        let url = format!("{}{}", self.base, path);
        let mut req = self.http.request(method, &url);
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req
            .send()
            .map_err(|e| ClientError::Transport(format!("cannot reach admin API at {}: {e}", self.base)))?;
        Self::read(resp)
    }

    fn read(resp: Response) -> Result<Value, ClientError> {
        let status = resp.status();
        let text = resp
            .text()
            .map_err(|e| ClientError::Transport(format!("reading response: {e}")))?;
        if status.is_success() {
            return serde_json::from_str(&text)
                .map_err(|e| ClientError::Transport(format!("unreadable response: {e}")));
        }
        let body = serde_json::from_str(&text).unwrap_or_else(|_| ErrorBody {
            reason: "http-error".into(),
            detail: format!("{status}: {text}"),
        });
        Err(ClientError::Api { status, body })
    }

    pub fn list_registered(&self) -> Result<Value, ClientError> {
        self.call(Method::GET, "/api/devices/registered", None)
    }

    pub fn list_connected(&self) -> Result<Value, ClientError> {
        self.call(Method::GET, "/api/devices/connected", None)
    }

    pub fn register(&self, serial: &str, label: &str) -> Result<Value, ClientError> {
        let body = serde_json::json!({ "serial": serial, "label": label });
        self.call(Method::POST, "/api/devices", Some(&body))
    }

    pub fn revoke(&self, serial: &str) -> Result<Value, ClientError> {
        self.call(Method::DELETE, &format!("/api/devices/{}", segment(serial)), None)
    }

    pub fn disable(&self, serial: &str) -> Result<Value, ClientError> {
        self.call(Method::POST, &format!("/api/devices/{}/disable", segment(serial)), None)
    }

    pub fn enable(&self, serial: &str) -> Result<Value, ClientError> {
        self.call(Method::POST, &format!("/api/devices/{}/enable", segment(serial)), None)
    }

    pub fn rescan(&self) -> Result<Value, ClientError> {
        self.call(Method::POST, "/api/rescan", None)
    }
}
