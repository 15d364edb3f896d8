//! Scripted runs against a fresh in-process stack.
//!
//! A script is a JSON document with a list of access points and an ordered
//! list of steps. Action steps drive the simulation; each `assert` step
//! produces exactly one report row whose status is `Yes` when all of its
//! checks hold. See `docs/scenarios.md` for the schema.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::network::Delivery;
use super::sim::{SimError, Simulation};
use crate::agent::AgentIdentitySource;
use crate::model::{normalize_serial, DeviceStatus, Verdict};
use crate::protocol::Action;
use crate::session::ApId;

const DEMO_SCRIPT: &str = include_str!("paper-demo.json");

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(String),
    #[error("step {step}: {message}")]
    Script { step: usize, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default = "default_aps")]
    pub aps: Vec<String>,
    pub steps: Vec<Step>,
}

fn default_aps() -> Vec<String> {
    vec!["ap-1".to_owned()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    Register {
        serial: String,
        #[serde(default)]
        label: String,
    },
    Revoke {
        serial: String,
    },
    StartAgent {
        name: String,
        serial: String,
        #[serde(default)]
        hostname: String,
        ip: String,
        ap: String,
    },
    Join {
        agent: String,
    },
    Roam {
        agent: String,
        ap: String,
    },
    Control {
        serial: String,
        action: Action,
        #[serde(default = "default_operator")]
        operator: String,
    },
    Rescan,
    Assert {
        function: String,
        #[serde(default)]
        description: String,
        #[serde(default)]
        remarks: String,
        checks: Vec<Check>,
    },
}

fn default_operator() -> String {
    "scenario".to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "check", rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    /// The serial has an active registration.
    Registered { serial: String },
    /// Exactly `count` active registrations exist.
    RegisteredCount { count: usize },
    /// The agent's most recent verdict.
    Verdict { agent: String, expect: Verdict },
    /// Status of the agent's row in the connected table.
    SessionStatus { agent: String, expect: DeviceStatus },
    /// The agent's own view of its interface.
    InterfaceStatus { agent: String, expect: DeviceStatus },
    /// Outcome of a probe frame injected at the agent's access point.
    Delivery { agent: String, expect: Delivery },
    /// The connected table shows the agent's serial, hostname and IP, via
    /// the access point it is attached to.
    Collected { agent: String },
    /// Connected rows span at least `min` distinct access points.
    CollectedViaAps { min: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExecutionStatus {
    Yes,
    No,
}

impl fmt::Display for ExecutionStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExecutionStatus::Yes => "Yes",
            ExecutionStatus::No => "No",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub function: String,
    pub description: String,
    pub status: ExecutionStatus,
    pub remarks: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub scenario: String,
    pub rows: Vec<ReportRow>,
}

impl ScenarioReport {
    pub fn all_yes(&self) -> bool {
        self.rows.iter().all(|r| r.status == ExecutionStatus::Yes)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Plain-text table with the columns Functions, Description,
    /// Execution Status and Remarks.
    pub fn render_table(&self) -> String {
        let header = ["Functions", "Description", "Execution Status", "Remarks"];
        let rows: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| [r.function.clone(), r.description.clone(), r.status.to_string(), r.remarks.clone()])
            .collect();
        let mut widths = header.map(|h| h.chars().count());
        for row in &rows {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: [&str; 4]| {
            let mut s = String::new();
            for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
                if i > 0 {
                    s.push_str(" | ");
                }
                let _ = write!(s, "{cell:<w$}");
            }
            out.push_str(s.trim_end());
            out.push('\n');
        };
        line(&mut out, header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        line(&mut out, [&rule[0], &rule[1], &rule[2], &rule[3]]);
        for r in &rows {
            line(&mut out, [&r[0], &r[1], &r[2], &r[3]]);
        }
        out
    }
}

pub fn parse_script(json: &str) -> Result<ScenarioScript, ScenarioError> {
    serde_json::from_str(json).map_err(|e| ScenarioError::Parse(e.to_string()))
}

pub fn load_script(path: &Path) -> Result<ScenarioScript, ScenarioError> {
    let text = std::fs::read_to_string(path).map_err(|e| ScenarioError::Parse(format!("{}: {e}", path.display())))?;
    parse_script(&text)
}

/// Scripts shipped with the crate, by name.
pub fn builtin(name: &str) -> Option<ScenarioScript> {
    match name {
        "paper-demo" => Some(parse_script(DEMO_SCRIPT).expect("built-in script parses")),
        _ => None,
    }
}

pub fn run_scenario(script: &ScenarioScript) -> Result<ScenarioReport, ScenarioError> {
    let mut sim = Simulation::new(script.aps.iter().cloned());
    let mut rows = Vec::new();
    for (index, step) in script.steps.iter().enumerate() {
        let fail = |e: SimError| ScenarioError::Script {
            step: index,
            message: e.to_string(),
        };
        match step {
            Step::Register { serial, label } => {
                sim.register(serial, label).map_err(fail)?;
            }
            Step::Revoke { serial } => {
                sim.revoke(serial).map_err(fail)?;
            }
            Step::StartAgent {
                name,
                serial,
                hostname,
                ip,
                ap,
            } => {
                let source = AgentIdentitySource::configured(serial, hostname, ip);
                sim.start_agent(name, &source, &ApId::new(ap.clone())).map_err(fail)?;
            }
            Step::Join { agent } => {
                sim.join(agent).map_err(fail)?;
            }
            Step::Roam { agent, ap } => {
                sim.roam(agent, &ApId::new(ap.clone())).map_err(fail)?;
            }
            Step::Control {
                serial,
                action,
                operator,
            } => {
                sim.control(serial, *action, operator).map_err(fail)?;
            }
            Step::Rescan => {
                sim.rescan().map_err(fail)?;
            }
            Step::Assert {
                function,
                description,
                remarks,
                checks,
            } => {
                let mut failures = Vec::new();
                for check in checks {
                    if let Err(msg) = evaluate(&mut sim, check).map_err(fail)? {
                        failures.push(msg);
                    }
                }
                let (status, remarks) = if failures.is_empty() {
                    (ExecutionStatus::Yes, remarks.clone())
                } else {
                    (ExecutionStatus::No, failures.join("; "))
                };
                rows.push(ReportRow {
                    function: function.clone(),
                    description: description.clone(),
                    status,
                    remarks,
                });
            }
        }
    }
    Ok(ScenarioReport {
        scenario: script.name.clone(),
        rows,
    })
}

type CheckResult = Result<Result<(), String>, SimError>;

fn expect_eq<T: PartialEq + fmt::Debug>(what: &str, expected: T, observed: T) -> Result<(), String> {
    if expected == observed {
        Ok(())
    } else {
        Err(format!("{what}: expected {expected:?}, observed {observed:?}"))
    }
}

fn evaluate(sim: &mut Simulation, check: &Check) -> CheckResult {
    Ok(match check {
        Check::Registered { serial } => {
            let active = normalize_serial(serial)
                .map(|s| sim.service().snapshot().contains(&s))
                .unwrap_or(false);
            expect_eq(&format!("{serial} registered"), true, active)
        }
        Check::RegisteredCount { count } => expect_eq("registered devices", *count, sim.service().snapshot().len()),
        Check::Verdict { agent, expect } => {
            let got = sim.agent(agent)?.verdict().map(|v| v.verdict);
            expect_eq(&format!("{agent} verdict"), Some(*expect), got)
        }
        Check::SessionStatus { agent, expect } => {
            let serial = sim.agent(agent)?.identity().serial().clone();
            let got = sim.service().session(&serial).map(|s| s.status());
            expect_eq(&format!("{agent} session status"), Some(*expect), got)
        }
        Check::InterfaceStatus { agent, expect } => {
            let got = sim.agent(agent)?.interface_status().ok();
            expect_eq(&format!("{agent} interface status"), Some(*expect), got)
        }
        Check::Delivery { agent, expect } => {
            let got = sim.probe(agent)?;
            expect_eq(&format!("{agent} traffic"), *expect, got)
        }
        Check::Collected { agent } => {
            let a = sim.agent(agent)?;
            let want = (
                a.identity().serial().to_string(),
                a.identity().hostname().to_owned(),
                a.identity().ip().to_owned(),
                a.ap().to_string(),
            );
            let got = sim.service().session(a.identity().serial()).map(|s| {
                (
                    s.serial().to_string(),
                    s.identity().hostname().to_owned(),
                    s.identity().ip().to_owned(),
                    s.ap_id().to_string(),
                )
            });
            expect_eq(&format!("{agent} connected row (serial, name, ip, ap)"), Some(want), got)
        }
        Check::CollectedViaAps { min } => {
            let aps: BTreeSet<String> = sim
                .service()
                .list_connected()
                .iter()
                .map(|s| s.ap_id().to_string())
                .collect();
            if aps.len() >= *min {
                Ok(())
            } else {
                Err(format!("connected rows span {} access point(s) {aps:?}, need {min}", aps.len()))
            }
        }
    })
}
