//! Deterministic in-process network: access points, agents and the
//! authorization service, driven step by step.

mod network;
mod scenario;
mod sim;

pub use network::{AccessPoint, Delivery, Destination, Frame, NetError, Network};
pub use scenario::{
    builtin, load_script, parse_script, run_scenario, Check, ExecutionStatus, ReportRow, ScenarioError,
    ScenarioReport, ScenarioScript, Step,
};
pub use sim::{SimAgent, SimError, Simulation, TimelineEntry};
