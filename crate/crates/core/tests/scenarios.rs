use std::io::Write;

use proptest::prelude::*;
use snap_core::agent::AgentIdentitySource;
use snap_core::model::DeviceStatus;
use snap_core::protocol::Action;
use snap_core::simnet::{builtin, load_script, run_scenario, Delivery, ExecutionStatus, ScenarioError, Simulation};

#[test]
fn demo_report_rows_in_order() {
    let report = run_scenario(&builtin("paper-demo").unwrap()).unwrap();
    let functions: Vec<_> = report.rows.iter().map(|r| r.function.as_str()).collect();
    assert_eq!(
        functions,
        [
            "Registration",
            "Collect Computer's Serial Number, IP address, Name",
            "Collect Computer's Serial Number, IP address, Name through access points",
            "Deny an unregistered computer network access",
            "Allow a registered computer network access",
            "Disable allowed computer",
        ]
    );
    assert!(report.rows.iter().all(|r| r.status == ExecutionStatus::Yes));
}

#[test]
fn script_loads_from_disk() {
    let mut file = tempfile::NamedTempFile::new().unwrap();
    write!(
        file,
        r#"{{"name":"disk","steps":[{{"op":"register","serial":"SN-A"}},
            {{"op":"assert","function":"reg","checks":[{{"check":"registered","serial":" sn-a "}}]}}]}}"#
    )
    .unwrap();
    let report = run_scenario(&load_script(file.path()).unwrap()).unwrap();
    assert_eq!(report.rows[0].status, ExecutionStatus::Yes);

    let missing = load_script(std::path::Path::new("/nonexistent/script.json"));
    assert!(matches!(missing, Err(ScenarioError::Parse(_))));
}

#[derive(Debug, Clone)]
enum Op {
    Register(usize),
    Revoke(usize),
    Join(usize),
    Roam(usize, usize),
    Disable(usize),
    Enable(usize),
    Rescan,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..4usize).prop_map(Op::Register),
        (0..4usize).prop_map(Op::Revoke),
        (0..4usize).prop_map(Op::Join),
        (0..4usize, 0..3usize).prop_map(|(a, p)| Op::Roam(a, p)),
        (0..4usize).prop_map(Op::Disable),
        (0..4usize).prop_map(Op::Enable),
        Just(Op::Rescan),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // After any sequence of operations, each device's gate agrees with its
    // session row, and only Enabled devices get traffic through.
    #[test]
    fn gates_follow_sessions(ops in proptest::collection::vec(op(), 0..40)) {
        let aps = ["ap-1", "ap-2", "ap-3"];
        let mut sim = Simulation::new(aps);
        let names: Vec<String> = (0..4).map(|i| format!("H{i}")).collect();
        for (i, name) in names.iter().enumerate() {
            let src = AgentIdentitySource::configured(&format!("SN-{i}"), name, &format!("10.0.0.{}", i + 1));
            sim.start_agent(name, &src, &"ap-1".into()).unwrap();
        }
        for op in ops {
            match op {
                Op::Register(i) => { sim.register(&format!("SN-{i}"), "").unwrap(); }
                Op::Revoke(i) => { let _ = sim.revoke(&format!("SN-{i}")); }
                Op::Join(i) => { sim.join(&names[i]).unwrap(); }
                Op::Roam(i, p) => { sim.roam(&names[i], &aps[p].into()).unwrap(); }
                Op::Disable(i) => { let _ = sim.control(&format!("SN-{i}"), Action::Disable, "t"); }
                Op::Enable(i) => { let _ = sim.control(&format!("SN-{i}"), Action::Enable, "t"); }
                Op::Rescan => { sim.rescan().unwrap(); }
            }
            prop_assert!(sim.gates_match_sessions());
            for name in &names {
                let serial = sim.agent(name).unwrap().identity().serial().clone();
                let enabled = sim.service().session(&serial).map(|s| s.status()) == Some(DeviceStatus::Enabled);
                let expect = if enabled { Delivery::Delivered } else { Delivery::Blocked };
                prop_assert_eq!(sim.probe(name).unwrap(), expect);
            }
        }
    }
}
