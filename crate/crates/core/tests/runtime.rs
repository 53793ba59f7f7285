use std::thread;
use std::time::Duration;

use cdi_core::cluster::{ClusterConfig, LocalCluster};
use cdi_core::controller::audit::{self, transfer_traces};
use cdi_core::transfer::{TransferStep, CROSS_HOST_STEPS, SAME_HOST_STEPS};
use cdi_core::wire::{ErrorKind, Message, MsgType};
use cdi_core::{CdiKey, ContainerId, ReturnCode, SdkError};

fn key(s: &str) -> CdiKey {
    CdiKey::new(s).unwrap()
}

fn small_cluster(hosts: usize, budget: u64) -> LocalCluster {
    LocalCluster::with_config(ClusterConfig {
        hosts,
        budget,
        phase_timeout: Duration::from_millis(800),
        ..ClusterConfig::default()
    })
    .unwrap()
}

fn wait_until(mut f: impl FnMut() -> bool) {
    for _ in 0..500 {
        if f() {
            return;
        }
        thread::sleep(Duration::from_millis(5));
    }
    panic!("condition not reached");
}

#[test]
fn return_codes_follow_the_contract() {
    let c = small_cluster(1, 1 << 20);
    let s1 = c.session(1, 0).unwrap();
    let s2 = c.session(2, 0).unwrap();

    let (rc, h) = s1.create(&key("k1"), 1024).unwrap();
    assert_eq!(rc, ReturnCode::Success);
    let h = h.unwrap();
    assert_eq!(s2.create(&key("k1"), 512).unwrap().0, ReturnCode::Conflict);
    assert_eq!(s1.create(&key("k2"), 2 << 20).unwrap().0, ReturnCode::Failure);

    assert_eq!(s2.use_key(&key("k1")).unwrap().0, ReturnCode::Success);
    assert_eq!(s2.use_key(&key("nope")).unwrap().0, ReturnCode::Conflict);
    assert_eq!(s2.use_key(&key("k1")).unwrap().0, ReturnCode::Success);
    let group = &c.controller().snapshot()[0].container_group;
    assert_eq!(group.iter().map(|c| c.0).collect::<Vec<_>>(), vec![1, 2]);

    let (rc, copy) = h.copy(&key("k1c")).unwrap();
    assert_eq!(rc, ReturnCode::Success);
    assert!(copy.unwrap().is_owner());
    assert_eq!(h.copy(&key("k1")).unwrap().0, ReturnCode::Conflict);
    let (_, big) = s1.create(&key("big"), 600 << 10).unwrap();
    assert_eq!(big.unwrap().copy(&key("big2")).unwrap().0, ReturnCode::Failure);
}

#[test]
fn unregistered_create_is_resource_failure() {
    let c = small_cluster(1, 1 << 20);
    let r = c.controller().create(ContainerId(99), &key("k"), 16);
    assert_eq!(r.status, -1);
    assert_eq!(r.error, Some(ErrorKind::Unregistered));
    assert!(c.controller().snapshot().is_empty());
}

#[test]
fn registration_replaces_and_validates() {
    let c = small_cluster(1, 1 << 20);
    let ctl = c.controller();
    assert!(ctl.register(ContainerId(1), "a:1", "h:9").is_ok());
    assert!(ctl.register(ContainerId(1), "a:2", "h:9").is_ok());
    assert_eq!(ctl.registration(ContainerId(1)).unwrap().container_endpoint, "a:2");
    assert_eq!(ctl.register(ContainerId(1), "", "h:9").error, Some(ErrorKind::MalformedEndpoint));
    // A second session under the same id is accepted.
    let _a = c.session(5, 0).unwrap();
    let _b = c.session(5, 0).unwrap();
}

#[test]
fn copy_is_exact_and_independent() {
    let c = small_cluster(1, 1 << 20);
    let s = c.session(1, 0).unwrap();
    let (_, h) = s.create(&key("k1"), 64).unwrap();
    let mut h = h.unwrap();
    h.write(0, b"original").unwrap();
    let (_, cp) = h.copy(&key("k1c")).unwrap();
    let mut cp = cp.unwrap();
    assert_eq!(cp.read(0, 64).unwrap(), h.read(0, 64).unwrap());
    cp.write(0, b"modified").unwrap();
    assert_eq!(h.read(0, 8).unwrap(), b"original");
}

#[test]
fn copy_by_non_owner_is_rejected() {
    let c = small_cluster(1, 1 << 20);
    let s1 = c.session(1, 0).unwrap();
    s1.create(&key("k1"), 64).unwrap();
    let r = c.controller().copy(ContainerId(2), &key("k1"), &key("x"));
    assert_eq!(r.error, Some(ErrorKind::NotOwner));
    let s2 = c.session(2, 0).unwrap();
    let (_, h2) = s2.use_key(&key("k1")).unwrap();
    assert!(matches!(h2.unwrap().copy(&key("x")), Err(SdkError::NotOwner { .. })));
}

#[test]
fn same_host_transfer_moves_no_payload() {
    let c = small_cluster(1, 64 << 20);
    let a = c.session(1, 0).unwrap();
    let b = c.session(2, 0).unwrap();
    let size = 10 << 20;
    let (_, h) = a.create(&key("obj"), size).unwrap();
    let mut h = h.unwrap();
    h.write(0, &vec![0xab; size as usize]).unwrap();
    let (_, peer) = b.use_key(&key("obj")).unwrap();
    let mut peer = peer.unwrap();
    let before = c.minion(0).totals();
    h.transfer(ContainerId(2)).unwrap();
    peer.access().unwrap();
    assert!(peer.is_local());
    assert!(peer.with_bytes(|b| b.iter().all(|&x| x == 0xab)).unwrap());
    assert_eq!(c.minion(0).totals(), before);
    let seg = c.minion(0).segment_info(&key("obj")).unwrap();
    assert_eq!(seg.counters.payload_bytes_in + seg.counters.payload_bytes_out, 0);

    let traces = transfer_traces(&c.controller().events());
    assert_eq!(traces.len(), 1);
    assert_eq!(traces[0].steps, SAME_HOST_STEPS.to_vec());
}

#[test]
fn cross_host_transfer_runs_five_steps() {
    let c = small_cluster(2, 64 << 20);
    let a = c.session(1, 0).unwrap();
    let b = c.session(2, 1).unwrap();
    let (_, h) = a.create(&key("obj"), 1 << 20).unwrap();
    let mut h = h.unwrap();
    let data: Vec<u8> = (0..1 << 20).map(|i| (i * 7 % 256) as u8).collect();
    h.write(0, &data).unwrap();
    b.use_key(&key("obj")).unwrap();
    h.transfer(ContainerId(2)).unwrap();
    assert!(!h.is_owner());
    assert!(matches!(h.read(0, 1), Err(SdkError::NotOwner { .. })));

    let (_, peer) = b.use_key(&key("obj")).unwrap();
    let mut peer = peer.unwrap();
    peer.access().unwrap();
    assert!(peer.is_local());
    assert_eq!(peer.read(0, 1 << 20).unwrap(), data);

    let traces = transfer_traces(&c.controller().events());
    assert_eq!(traces.len(), 1);
    assert_eq!(traces[0].steps, CROSS_HOST_STEPS.to_vec());
    // Source segment released; destination is authoritative.
    assert!(c.minion(0).segments().is_empty());
    assert_eq!(c.minion(0).budget().0, 0);
    let entry = &c.controller().snapshot()[0];
    assert_eq!(entry.owner, ContainerId(2));
    assert_eq!(entry.holder, Some(ContainerId(2)));
    assert_eq!(entry.host.0, "host1");
}

#[test]
fn remote_path_reads_and_writes_through_minion() {
    let c = small_cluster(2, 64 << 20);
    // Container 1 claims host 1 but its objects live on host 0.
    let a = c.session(1, 0).unwrap();
    let (_, h) = a.create(&key("obj"), 4096).unwrap();
    drop(h);
    let remote = cdi_core::Session::register(cdi_core::AppConfig::new(
        ContainerId(1),
        c.controller_endpoint(),
        c.minion_endpoint(1),
    ))
    .unwrap();
    let (_, h) = remote.use_key(&key("obj")).unwrap();
    let mut h = h.unwrap();
    h.access().unwrap();
    assert!(!h.is_local());
    h.write(100, b"remote bytes").unwrap();
    assert_eq!(h.read(100, 12).unwrap(), b"remote bytes");
    assert!(c.minion(0).totals().payload_bytes_in >= 12);
    assert!(matches!(h.read(4090, 10), Err(SdkError::OutOfBounds { .. })));
}

#[test]
fn transfer_rejections_leave_state_alone() {
    let c = small_cluster(1, 1 << 20);
    let a = c.session(1, 0).unwrap();
    let b = c.session(2, 0).unwrap();
    let (_, h) = a.create(&key("k"), 64).unwrap();
    let mut h = h.unwrap();
    assert_eq!(
        c.controller().transfer(ContainerId(2), &key("k"), ContainerId(1)).error,
        Some(ErrorKind::NotOwner)
    );
    let err = h.transfer(ContainerId(42)).unwrap_err();
    assert_eq!(err.kind(), Some(ErrorKind::UnknownTarget));
    assert!(h.is_owner());
    h.write(0, b"still mine").unwrap();
    h.transfer(ContainerId(1)).unwrap();
    assert!(h.is_owner());
    let (_, hb) = b.use_key(&key("k")).unwrap();
    let mut hb = hb.unwrap();
    assert!(matches!(hb.read(0, 1), Err(SdkError::NotOwner { .. })));
    assert!(matches!(hb.transfer(ContainerId(1)), Err(SdkError::NotOwner { .. })));
    assert_eq!(c.controller().snapshot()[0].owner, ContainerId(1));
    assert!(c.controller().events().iter().all(|e| e.step().is_none()));
}

#[test]
fn access_wait_blocks_until_transfer() {
    let c = small_cluster(2, 1 << 20);
    let a = c.session(1, 0).unwrap();
    let b = c.session(2, 1).unwrap();
    let (_, h) = a.create(&key("k"), 64).unwrap();
    let mut h = h.unwrap();
    h.access().unwrap();
    h.write(0, b"hello").unwrap();
    let (_, hb) = b.use_key(&key("k")).unwrap();
    let mut hb = hb.unwrap();
    let waiter = thread::spawn(move || {
        hb.access().unwrap();
        hb.read(0, 5).unwrap()
    });
    wait_until(|| c.controller().waiting(&key("k")) == 1);
    h.transfer(ContainerId(2)).unwrap();
    assert_eq!(waiter.join().unwrap(), b"hello");
}

#[test]
fn access_wait_requires_group_and_times_out() {
    let c = small_cluster(1, 1 << 20);
    let a = c.session(1, 0).unwrap();
    let _b = c.session(2, 0).unwrap();
    a.create(&key("k"), 64).unwrap();
    let r = c.controller().access_wait(ContainerId(2), &key("k"), None).unwrap_err();
    assert_eq!(r.error, Some(ErrorKind::NotInGroup));
    c.controller().use_key(ContainerId(2), &key("k"));
    let r = c
        .controller()
        .access_wait(ContainerId(2), &key("k"), Some(Duration::from_millis(30)))
        .unwrap_err();
    assert_eq!(r.error, Some(ErrorKind::Timeout));
    assert_eq!(c.controller().waiting(&key("k")), 0);
}

#[test]
fn destroy_releases_waiters_and_key() {
    let c = small_cluster(1, 1 << 20);
    let a = c.session(1, 0).unwrap();
    let b = c.session(2, 0).unwrap();
    let (_, h) = a.create(&key("k"), 64).unwrap();
    let (_, hb) = b.use_key(&key("k")).unwrap();
    let mut hb = hb.unwrap();
    let waiter = thread::spawn(move || hb.access());
    wait_until(|| c.controller().waiting(&key("k")) == 1);
    assert_eq!(
        c.controller().destroy(ContainerId(2), &key("k")).error,
        Some(ErrorKind::NotOwner)
    );
    h.unwrap().destroy().unwrap();
    let err = waiter.join().unwrap().unwrap_err();
    assert_eq!(err.kind(), Some(ErrorKind::DestroyedWhileWaiting));
    assert_eq!(c.minion(0).budget().0, 0);
    assert_eq!(
        c.controller().destroy(ContainerId(1), &key("k")).error,
        Some(ErrorKind::UnknownKey)
    );
    assert_eq!(a.create(&key("k"), 64).unwrap().0, ReturnCode::Success);
    let events = c.controller().events();
    assert_eq!(events.iter().filter(|e| e.phase == audit::DESTROY).count(), 1);
}

#[test]
fn stale_token_is_rejected_after_transfer() {
    let c = small_cluster(1, 1 << 20);
    let a = c.session(1, 0).unwrap();
    let b = c.session(2, 0).unwrap();
    let (_, h) = a.create(&key("k"), 64).unwrap();
    let mut h = h.unwrap();
    let stale = h.grant().unwrap().clone();
    b.use_key(&key("k")).unwrap();
    h.transfer(ContainerId(2)).unwrap();
    let r = c
        .minion(0)
        .read(&key("k"), stale.token, 0, 8)
        .unwrap_err();
    assert!(matches!(r, cdi_core::minion::MinionError::AccessDenied(_)));
    assert!(!std::path::Path::new(&stale.segment).exists());
}

fn abort_at(step: MsgType, same_host: bool) {
    let hosts = if same_host { 1 } else { 2 };
    let c = small_cluster(hosts, 1 << 20);
    let a = c.session(1, 0).unwrap();
    let b = c.session(2, hosts - 1).unwrap();
    let (_, h) = a.create(&key("k"), 4096).unwrap();
    let mut h = h.unwrap();
    h.write(0, b"precious").unwrap();
    b.use_key(&key("k")).unwrap();
    let faulty = match step {
        MsgType::MinionSetOwner | MsgType::MinionGrant if !same_host => 1,
        _ => 0,
    };
    c.minion(faulty).faults().fail_next(step);
    let err = h.transfer(ContainerId(2)).unwrap_err();
    assert_eq!(err.kind(), Some(ErrorKind::TransferAborted), "{step:?}");
    // NO-LOST-OBJECT: owner and access back at the source.
    assert!(h.is_owner());
    assert_eq!(h.read(0, 8).unwrap(), b"precious");
    let entry = &c.controller().snapshot()[0];
    assert_eq!(entry.owner, ContainerId(1));
    assert_eq!(entry.holder, Some(ContainerId(1)));
    assert!(entry.transfer.is_none());
    if !same_host {
        assert!(c.minion(1).segments().is_empty(), "{step:?}");
    }
    assert_eq!(c.minion(0).segment_info(&key("k")).unwrap().owner, Some(ContainerId(1)));
    let traces = transfer_traces(&c.controller().events());
    assert!(traces[0].aborted);
    // The object remains fully usable.
    h.transfer(ContainerId(2)).unwrap();
}

#[test]
fn aborts_return_object_to_source() {
    for step in [
        MsgType::MinionRevoke,
        MsgType::MinionCopyPush,
        MsgType::MinionSetOwner,
        MsgType::MinionGrant,
    ] {
        abort_at(step, false);
    }
    for step in [MsgType::MinionRevoke, MsgType::MinionSetOwner, MsgType::MinionGrant] {
        abort_at(step, true);
    }
}

#[test]
fn corrupted_copy_aborts_transfer() {
    let c = small_cluster(2, 1 << 20);
    let a = c.session(1, 0).unwrap();
    let b = c.session(2, 1).unwrap();
    let (_, h) = a.create(&key("k"), 8192).unwrap();
    let mut h = h.unwrap();
    h.write(0, &[5; 8192]).unwrap();
    b.use_key(&key("k")).unwrap();
    c.minion(0).faults().corrupt_next_push();
    assert_eq!(h.transfer(ContainerId(2)).unwrap_err().kind(), Some(ErrorKind::TransferAborted));
    assert_eq!(h.read(0, 8192).unwrap(), vec![5; 8192]);
}

#[test]
fn phase_timeout_aborts_transfer() {
    let c = small_cluster(2, 1 << 20);
    let a = c.session(1, 0).unwrap();
    let b = c.session(2, 1).unwrap();
    let (_, h) = a.create(&key("k"), 64).unwrap();
    let mut h = h.unwrap();
    b.use_key(&key("k")).unwrap();
    c.minion(1).faults().delay_next(MsgType::MinionGrant, Duration::from_millis(1500));
    let err = h.transfer(ContainerId(2)).unwrap_err();
    assert_eq!(err.kind(), Some(ErrorKind::TransferAborted));
    assert!(err.to_string().contains("minion unreachable"), "{err}");
    assert!(h.is_owner());
    h.write(0, b"ok").unwrap();
    // Once the stalled grant drains, a retry goes through.
    thread::sleep(Duration::from_millis(1000));
    h.transfer(ContainerId(2)).unwrap();
    assert_eq!(c.controller().snapshot()[0].owner, ContainerId(2));
}

#[test]
fn audit_over_the_wire() {
    let c = small_cluster(1, 1 << 20);
    let a = c.session(1, 0).unwrap();
    assert!(a.audit().unwrap().is_empty());
    a.create(&key("k1"), 64).unwrap();
    let entries = a.audit().unwrap();
    assert_eq!(entries.len(), 1);
    assert_eq!(entries[0].owner, ContainerId(1));
    let counters = a.minion_stats(&c.minion_endpoint(0), None).unwrap();
    assert_eq!(counters.payload_bytes_in, 0);
    let r = a.call_reply(Message::MinionRevoke { key: key("k1") }).unwrap();
    assert_eq!(r.error, Some(ErrorKind::BadRequest));
}

#[test]
fn ping_pong_many_rounds() {
    let c = small_cluster(2, 1 << 20);
    let a = c.session(1, 0).unwrap();
    let b = c.session(2, 1).unwrap();
    let (_, h) = a.create(&key("ball"), 256).unwrap();
    let mut h = h.unwrap();
    let (_, hb) = b.use_key(&key("ball")).unwrap();
    let mut hb = hb.unwrap();
    let pong = thread::spawn(move || {
        for i in 0..20u8 {
            hb.access().unwrap();
            assert_eq!(hb.read(0, 1).unwrap(), [i * 2]);
            hb.write(0, &[i * 2 + 1]).unwrap();
            hb.transfer(ContainerId(1)).unwrap();
        }
    });
    for i in 0..20u8 {
        h.access().unwrap();
        if i > 0 {
            assert_eq!(h.read(0, 1).unwrap(), [i * 2 - 1]);
        }
        h.write(0, &[i * 2]).unwrap();
        h.transfer(ContainerId(2)).unwrap();
    }
    pong.join().unwrap();
    h.access().unwrap();
    assert_eq!(h.read(0, 1).unwrap(), [39]);
    let traces = transfer_traces(&c.controller().events());
    assert_eq!(traces.len(), 40);
    assert!(traces.iter().all(|t| t.steps == CROSS_HOST_STEPS.to_vec()));
    assert_eq!(traces[0].steps[1], TransferStep::CopyPush);
}
