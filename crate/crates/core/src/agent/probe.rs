//! Best-effort discovery of the host's own identity.
//!
//! The serial comes from the platform's firmware inventory (SMBIOS on
//! Linux and Windows, the platform expert on macOS). When it cannot be
//! read, or reads as a vendor placeholder, probing fails rather than
//! inventing a value.

use std::net::UdpSocket;
use std::process::Command;

#[derive(Debug, Clone)]
pub struct HostFacts {
    pub serial: Result<String, String>,
    pub hostname: String,
    pub ip: String,
}

pub fn probe_host() -> HostFacts {
    HostFacts {
        serial: firmware_serial().and_then(reject_placeholder),
        hostname: hostname(),
        ip: outbound_ip(),
    }
}

const PLACEHOLDERS: &[&str] = &[
    "",
    "0",
    "0123456789",
    "DEFAULT STRING",
    "NONE",
    "NOT APPLICABLE",
    "NOT SPECIFIED",
    "SYSTEM SERIAL NUMBER",
    "TO BE FILLED BY O.E.M.",
];

fn reject_placeholder(raw: String) -> Result<String, String> {
    let trimmed = raw.trim();
    if PLACEHOLDERS.iter().any(|p| p.eq_ignore_ascii_case(trimmed)) {
        Err(format!("firmware reports placeholder serial {trimmed:?}"))
    } else {
        Ok(trimmed.to_owned())
    }
}

#[cfg(target_os = "linux")]
fn firmware_serial() -> Result<String, String> {
    const SOURCES: &[&str] = &[
        "/sys/class/dmi/id/product_serial",
        "/sys/class/dmi/id/board_serial",
        "/sys/class/dmi/id/chassis_serial",
    ];
    let mut errors = Vec::new();
    for path in SOURCES {
        match std::fs::read_to_string(path) {
            Ok(s) if !s.trim().is_empty() => return Ok(s),
            Ok(_) => errors.push(format!("{path}: empty")),
            Err(e) => errors.push(format!("{path}: {e}")),
        }
    }
    match run("dmidecode", &["-s", "system-serial-number"]) {
        Ok(s) => Ok(s),
        Err(e) => {
            errors.push(format!("dmidecode: {e}"));
            Err(errors.join("; "))
        }
    }
}

#[cfg(target_os = "macos")]
fn firmware_serial() -> Result<String, String> {
    let out = run("ioreg", &["-rd1", "-c", "IOPlatformExpertDevice"])?;
    out.lines()
        .find(|l| l.contains("IOPlatformSerialNumber"))
        .and_then(|l| l.rsplit('"').nth(1))
        .map(str::to_owned)
        .ok_or_else(|| "IOPlatformSerialNumber not present".to_owned())
}

#[cfg(target_os = "windows")]
fn firmware_serial() -> Result<String, String> {
    run(
        "powershell",
        &["-NoProfile", "-Command", "(Get-CimInstance Win32_BIOS).SerialNumber"],
    )
}

#[cfg(not(any(target_os = "linux", target_os = "macos", target_os = "windows")))]
fn firmware_serial() -> Result<String, String> {
    Err("no firmware inventory interface on this platform".into())
}

#[allow(dead_code)]
fn run(cmd: &str, args: &[&str]) -> Result<String, String> {
    let out = Command::new(cmd).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_owned())
}

fn hostname() -> String {
    if let Ok(h) = std::fs::read_to_string("/proc/sys/kernel/hostname") {
        return h.trim().to_owned();
    }
    for var in ["COMPUTERNAME", "HOSTNAME"] {
        if let Ok(h) = std::env::var(var) {
            return h;
        }
    }
    run("hostname", &[]).unwrap_or_default()
}

/// Address of the interface the OS would route external traffic through.
/// Connecting a UDP socket sends nothing on the wire.
fn outbound_ip() -> String {
    UdpSocket::bind("0.0.0.0:0")
        .and_then(|s| s.connect("192.0.2.1:9").map(|()| s))
        .and_then(|s| s.local_addr())
        .map(|a| a.ip().to_string())
        .unwrap_or_else(|_| "127.0.0.1".to_owned())
}
