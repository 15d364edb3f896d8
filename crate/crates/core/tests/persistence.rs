use std::sync::Arc;

use snap_core::clock::ManualClock;
use snap_core::model::{normalize_serial, DeviceStatus, Verdict};
use snap_core::protocol::{Action, JoinRequest};
use snap_core::registry::RegistryError;
use snap_core::service::{AuthService, ServiceError};

fn join(serial: &str, ap: &str) -> JoinRequest {
    JoinRequest {
        serial_raw: serial.into(),
        hostname: "HOST".into(),
        ip: "10.0.0.2".into(),
        ap_id: ap.into(),
    }
}

#[test]
fn registrations_and_sessions_survive_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::at_epoch());
    {
        let svc = AuthService::open(dir.path(), clock.clone()).unwrap();
        svc.register("sn-a", "A").unwrap();
        svc.register("SN-B", "B").unwrap();
        svc.revoke("SN-B").unwrap();
        assert_eq!(svc.handle_join(&join("SN-A", "ap-1")).unwrap().verdict, Verdict::Allow);
    }
    let svc = AuthService::open(dir.path(), clock.clone()).unwrap();
    let view = svc.snapshot();
    assert!(view.contains(&normalize_serial("SN-A").unwrap()));
    assert!(!view.contains(&normalize_serial("SN-B").unwrap()));
    assert_eq!(svc.list_connected().len(), 1);

    // A restart that purges leaves the registry alone.
    assert_eq!(svc.rescan().unwrap(), 1);
    drop(svc);
    let svc = AuthService::open(dir.path(), clock).unwrap();
    assert!(svc.list_connected().is_empty());
    assert_eq!(svc.list_registered().len(), 2);
}

#[test]
fn compaction_keeps_current_state() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::at_epoch());
    let svc = AuthService::open(dir.path(), clock.clone()).unwrap();
    for i in 0..20 {
        svc.register(&format!("SN-{}", i % 4), "x").unwrap();
        if i % 3 == 0 {
            svc.revoke(&format!("SN-{}", i % 4)).unwrap();
        }
    }
    let before = svc.list_registered();
    svc.compact_registry().unwrap();
    drop(svc);
    let lines = std::fs::read_to_string(dir.path().join("registry.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 4);
    let svc = AuthService::open(dir.path(), clock).unwrap();
    assert_eq!(svc.list_registered(), before);
}

#[test]
fn corrupt_registry_refuses_to_open() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("registry.jsonl"),
        "{\"serial\":\"SN-A\",\"label\":\"\",\"registered_at\":\"2024-01-01T00:00:00Z\",\"revoked\":false}\nnot json\n",
    )
    .unwrap();
    let err = AuthService::open(dir.path(), Arc::new(ManualClock::at_epoch())).unwrap_err();
    match err {
        ServiceError::Registry(RegistryError::CorruptStore { line, .. }) => assert_eq!(line, 2),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn control_round_trip_through_store() {
    let dir = tempfile::tempdir().unwrap();
    let clock = Arc::new(ManualClock::at_epoch());
    let svc = AuthService::open(dir.path(), clock.clone()).unwrap();
    svc.register("SN-A", "").unwrap();
    svc.handle_join(&join("SN-A", "ap-1")).unwrap();
    let serial = normalize_serial("SN-A").unwrap();
    svc.set_status(&serial, Action::Disable, "op").unwrap();
    drop(svc);
    let svc = AuthService::open(dir.path(), clock).unwrap();
    assert_eq!(svc.session(&serial).unwrap().status(), DeviceStatus::Disabled);
}
