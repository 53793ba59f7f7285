use std::time::Duration;

use cdi_core::cluster::{ClusterConfig, LocalCluster};
use cdi_core::controller::audit::{read_log, transfer_traces};
use cdi_core::stress::{run_local, StressParams};
use cdi_core::transfer::steps_for;

#[test]
fn stress_keeps_invariants_under_faults() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("audit.log");
    let cluster = LocalCluster::with_config(ClusterConfig {
        hosts: 2,
        audit_log: Some(log.clone()),
        ..ClusterConfig::default()
    })
    .unwrap();
    let p = StressParams {
        clients: 4,
        objects: 8,
        ops: 1200,
        ..StressParams::default()
    };
    let summary = run_local(&cluster, &p, 500, Some(Duration::from_millis(40))).unwrap();
    assert_eq!(summary.violations(), 0, "{summary:#?}");
    assert!(summary.ops() >= 1200);
    assert!(summary.snapshots.samples >= 500);
    assert!(summary.total(|c| c.stale_attempts) > 0);

    let traces = transfer_traces(&read_log(&log).unwrap());
    assert!(!traces.is_empty());
    for t in &traces {
        if t.aborted {
            continue;
        }
        let cross = t.steps.len() == 5;
        assert_eq!(t.steps, steps_for(!cross).to_vec(), "{t:?}");
    }
}
