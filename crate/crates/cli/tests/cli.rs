use std::io::{BufRead, BufReader, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};

use rand::{Rng, SeedableRng};
use serde_json::Value;
use snap_core::agent::{probe_identity, Agent, AgentIdentitySource, RetryPolicy};
use snap_core::session::ApId;

const SNAP: &str = env!("CARGO_BIN_EXE_snap");
const SNAP_AGENT: &str = env!("CARGO_BIN_EXE_snap-agent");

struct Served {
    child: Child,
    device: SocketAddr,
    admin: String,
}

impl Served {
    fn start(data_dir: &Path) -> Served {
        let mut child = Command::new(SNAP)
            .args(["serve", "--device-port", "0", "--admin-port", "0", "--device-bind", "127.0.0.1", "--data-dir"])
            .arg(data_dir)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .spawn()
            .unwrap();
        let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
        let device = lines.next().unwrap().unwrap();
        let admin = lines.next().unwrap().unwrap();
        Served {
            child,
            device: device.trim_start_matches("device port ").parse().unwrap(),
            admin: admin.trim_start_matches("admin API").trim().to_owned(),
        }
    }

    fn snap(&self, args: &[&str]) -> Output {
        self.snap_with_input(args, "")
    }

    fn snap_with_input(&self, args: &[&str], input: &str) -> Output {
        let mut child = Command::new(SNAP)
            .args(args)
            .env("SNAP_ADMIN_URL", &self.admin)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
        child.wait_with_output().unwrap()
    }

    fn json(&self, args: &[&str]) -> Value {
        let mut all = vec!["--json"];
        all.extend_from_slice(args);
        let out = self.snap(&all);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        serde_json::from_slice(&out.stdout).unwrap()
    }

    fn join(&self, serial: &str, ap: &str) -> Agent {
        let id = probe_identity(&AgentIdentitySource::configured(serial, serial, "10.1.1.1")).unwrap();
        Agent::join(self.device, ApId::new(ap), id, RetryPolicy::default()).unwrap()
    }

    fn kill(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Served {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn register_then_list() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Served::start(dir.path());
    let out = srv.snap(&["register", "SN-KOLSOLT", "--label", "KOLSOLT"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(text(&out.stdout), "registered SN-KOLSOLT\n");
    let list = srv.snap(&["list-registered"]);
    let table = text(&list.stdout);
    let mut lines = table.lines();
    assert!(lines.next().unwrap().starts_with("SERIAL      LABEL    REGISTERED AT"));
    assert!(lines.next().unwrap().starts_with("SN-KOLSOLT  KOLSOLT  20"));
    let rows = srv.json(&["list-registered"]);
    assert_eq!(rows[0]["serial"], "SN-KOLSOLT");
}

#[test]
fn disable_prompts_and_reports_missing_sessions() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Served::start(dir.path());
    srv.snap(&["register", "SN-RAFIKI"]);
    let _rafiki = srv.join("SN-RAFIKI", "ap-1");

    let out = srv.snap_with_input(&["disable", "SN-RAFIKI"], "n\n");
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).starts_with("Disable SN-RAFIKI? [y/N]"));
    assert_eq!(srv.json(&["list-connected"])[0]["status"], "Enabled");

    let out = srv.snap_with_input(&["disable", "SN-RAFIKI"], "y\n");
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).ends_with("SN-RAFIKI is now Disabled\n"));

    let out = srv.snap(&["disable", "--yes", "UNKNOWN"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("no live session"), "{}", text(&out.stderr));

    let out = srv.snap(&["enable", "SN-RAFIKI"]);
    assert_eq!(out.status.code(), Some(0));
    let table = text(&srv.snap(&["list-connected"]).stdout);
    assert!(table.starts_with("SERIAL     NAME       IP        AP    VERDICT  STATUS   CONNECTED AT"), "{table}");
    assert!(table.contains("SN-RAFIKI  SN-RAFIKI  10.1.1.1  ap-1  Allow    Enabled"), "{table}");
}

#[test]
fn enabling_unregistered_device_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Served::start(dir.path());
    let _k = srv.join("SN-KOLSOLT", "ap-1");
    let out = srv.snap(&["enable", "SN-KOLSOLT"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("register this device first"));
}

#[test]
fn unreachable_admin_api_exits_1() {
    let out = Command::new(SNAP)
        .args(["list-registered"])
        .env("SNAP_ADMIN_URL", "http://127.0.0.1:9")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("cannot reach admin API"));
}

#[test]
fn scenario_exit_codes() {
    let out = Command::new(SNAP).args(["--json", "scenario", "paper-demo"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);

    let dir = tempfile::tempdir().unwrap();
    let tampered = dir.path().join("tampered.json");
    std::fs::write(
        &tampered,
        r#"{"name":"tampered","steps":[
            {"op":"start_agent","name":"K","serial":"SN-KOLSOLT","hostname":"KOLSOLT","ip":"192.168.0.15","ap":"ap-1"},
            {"op":"join","agent":"K"},
            {"op":"assert","function":"Allow KOLSOLT","checks":[{"check":"verdict","agent":"K","expect":"Allow"}]}]}"#,
    )
    .unwrap();
    let out = Command::new(SNAP).arg("scenario").arg(&tampered).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stdout).contains("| No "));

    let out = Command::new(SNAP).args(["scenario", "/no/such/file.json"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = Command::new(SNAP).args(["register"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn agent_binary_reports_verdict() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Served::start(dir.path());
    let run = |serial: &str| {
        Command::new(SNAP_AGENT)
            .args(["--server", &srv.device.to_string(), "--ap", "ap-2", "--serial", serial])
            .args(["--hostname", "KOLSOLT", "--ip", "192.168.0.15", "--once"])
            .output()
            .unwrap()
    };
    let out = run("sn-kolsolt");
    assert_eq!(out.status.code(), Some(0));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("SN-KOLSOLT (KOLSOLT, 192.168.0.15) joining via ap-2"), "{stdout}");
    assert!(stdout.contains("verdict Deny (unregistered); interface Disabled"), "{stdout}");

    srv.snap(&["register", "SN-KOLSOLT"]);
    let out = run("SN-KOLSOLT");
    assert!(text(&out.stdout).contains("verdict Allow; interface Enabled"));

    let out = Command::new(SNAP_AGENT).args(["--ap", "ap-1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2), "serial or --probe is required");
}

#[test]
fn killed_server_restarts_with_registry_and_empty_table() {
    let dir = tempfile::tempdir().unwrap();
    let srv = Served::start(dir.path());
    for i in 0..5 {
        assert!(srv.snap(&["register", &format!("SN-{i}")]).status.success());
    }
    let _a = srv.join("SN-0", "ap-1");
    assert_eq!(srv.json(&["list-connected"]).as_array().unwrap().len(), 1);
    srv.kill();

    let srv = Served::start(dir.path());
    assert!(srv.json(&["list-connected"]).as_array().unwrap().is_empty());
    assert_eq!(srv.json(&["list-registered"]).as_array().unwrap().len(), 5);
}

type Observed = (Vec<(String, String)>, Vec<(String, String, String, String)>);

/// State as seen through the API, without timestamps and session ids.
fn observable(srv: &Served) -> Observed {
    let registered = srv
        .json(&["list-registered"])
        .as_array()
        .unwrap()
        .iter()
        .map(|r| (r["serial"].as_str().unwrap().to_owned(), r["label"].as_str().unwrap().to_owned()))
        .collect();
    let mut connected: Vec<_> = srv
        .json(&["list-connected"])
        .as_array()
        .unwrap()
        .iter()
        .map(|r| {
            (
                r["serial"].as_str().unwrap().to_owned(),
                r["verdict"].as_str().unwrap().to_owned(),
                r["reason"].to_string(),
                r["status"].as_str().unwrap().to_owned(),
            )
        })
        .collect();
    connected.sort();
    (registered, connected)
}

// The same operations issued through the CLI and as raw HTTP calls leave
// two servers in the same state, with the same success/failure outcomes.
#[test]
fn cli_matches_raw_api() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let via_cli = Served::start(d1.path());
    let via_api = Served::start(d2.path());
    let http = reqwest::blocking::Client::new();
    let mut rng = rand::rngs::StdRng::seed_from_u64(7);
    let serials = ["SN-A", "SN-B", "SN-C"];
    for s in serials {
        for mut agent in [via_cli.join(s, "ap-1"), via_api.join(s, "ap-1")] {
            std::thread::spawn(move || while agent.next_event().is_ok() {});
        }
    }

    for _ in 0..30 {
        let serial = serials[rng.random_range(0..serials.len())];
        let (args, method, path): (Vec<&str>, &str, String) = match rng.random_range(0..5) {
            0 => (vec!["register", serial, "--label", "L"], "POST", "/api/devices".into()),
            1 => (vec!["revoke", serial], "DELETE", format!("/api/devices/{serial}")),
            2 => (vec!["disable", "--yes", serial], "POST", format!("/api/devices/{serial}/disable")),
            3 => (vec!["enable", serial], "POST", format!("/api/devices/{serial}/enable")),
            _ => (vec!["rescan"], "POST", "/api/rescan".into()),
        };
        let cli_ok = via_cli.snap(&args).status.success();
        let url = format!("{}{}", via_api.admin, path);
        let req = match method {
            "DELETE" => http.delete(&url),
            _ if args[0] == "register" => http.post(&url).json(&serde_json::json!({"serial": serial, "label": "L"})),
            _ => http.post(&url),
        };
        let api_ok = req.send().unwrap().status().is_success();
        assert_eq!(cli_ok, api_ok, "{args:?}");
        if args[0] == "rescan" {
            // Agents rejoin on their own; wait for both tables to refill.
            for srv in [&via_cli, &via_api] {
                for _ in 0..200 {
                    if srv.json(&["list-connected"]).as_array().unwrap().len() == serials.len() {
                        break;
                    }
                    std::thread::sleep(std::time::Duration::from_millis(10));
                }
            }
        }
        assert_eq!(observable(&via_cli), observable(&via_api), "after {args:?}");
    }
}
