//! Randomized multi-client workload used to check the ownership invariants.
//!
//! Each client owns a share of the objects at start, joins every object's
//! group, and then repeatedly waits briefly for a random object, reads and
//! writes it, sometimes copies it, and passes it on to a random peer. After
//! each hand-off the client replays its stale grant against the minion and
//! the segment path, and counts any that is honoured.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::cluster::LocalCluster;
use crate::controller::{check_snapshot, Controller};
use crate::model::{CdiKey, ContainerId, ReturnCode};
use crate::net::Pools;
use crate::sdk::{CdiHandle, SdkError, Session};
use crate::wire::{ErrorKind, Grant, Message, MsgType};

pub const CLIENT_BASE_ID: u64 = 200;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StressParams {
    pub clients: usize,
    pub objects: usize,
    /// Operations across all clients.
    pub ops: u64,
    pub object_size: u64,
    pub seed: u64,
}

impl Default for StressParams {
    fn default() -> Self {
        StressParams {
            clients: 8,
            objects: 16,
            ops: 5000,
            object_size: 64 * 1024,
            seed: 1,
        }
    }
}

impl StressParams {
    pub fn client_id(&self, index: usize) -> ContainerId {
        ContainerId(CLIENT_BASE_ID + index as u64)
    }

    pub fn key(&self, object: usize) -> CdiKey {
        CdiKey::new(format!("stress-{object}")).expect("short key")
    }

    pub fn ops_per_client(&self) -> u64 {
        self.ops.div_ceil(self.clients as u64)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client: u64,
    pub ops: u64,
    pub accesses: u64,
    pub access_timeouts: u64,
    pub reads: u64,
    pub writes: u64,
    pub copies: u64,
    pub transfers: u64,
    pub aborted: u64,
    /// Aborted transfers that did not leave access with this client.
    pub lost_on_abort: u64,
    pub stale_attempts: u64,
    pub stale_accepted: u64,
    pub data_mismatches: u64,
    pub errors: Vec<String>,
}

impl ClientReport {
    pub fn violations(&self) -> u64 {
        self.stale_accepted + self.lost_on_abort + self.data_mismatches
    }

    fn error(&mut self, what: &str, e: impl std::fmt::Display) {
        if self.errors.len() < 20 {
            self.errors.push(format!("{what}: {e}"));
        }
    }
}

fn use_when_created(session: &Session, key: &CdiKey) -> Result<CdiHandle, SdkError> {
    let deadline = Instant::now() + Duration::from_secs(30);
    loop {
        if let (ReturnCode::Success, Some(h)) = session.use_key(key)? {
            return Ok(h);
        }
        if Instant::now() > deadline {
            return Err(SdkError::Remote {
                kind: ErrorKind::UnknownKey,
                detail: format!("{key} never appeared"),
            });
        }
        thread::sleep(Duration::from_millis(5));
    }
}

/// Replay a revoked grant: remote read, remote write and opening the segment.
fn probe_stale(pools: &Pools, key: &CdiKey, g: &Grant, report: &mut ClientReport) {
    let pool = pools.get(&g.minion);
    let attempts = [
        Message::Read {
            key: key.clone(),
            token: g.token,
            offset: 0,
            length: 8,
        },
        Message::Write {
            key: key.clone(),
            token: g.token,
            offset: 0,
            payload: vec![0xee; 8],
        },
    ];
    for msg in attempts {
        report.stale_attempts += 1;
        match pool.call_reply(msg) {
            Ok(r) if r.is_ok() => report.stale_accepted += 1,
            Ok(_) => {}
            Err(e) => report.error("stale probe", e),
        }
    }
    report.stale_attempts += 1;
    if std::fs::OpenOptions::new().read(true).write(true).open(&g.segment).is_ok() {
        report.stale_accepted += 1;
    }
}

pub fn run_client(session: &Session, index: usize, p: &StressParams) -> Result<ClientReport, SdkError> {
    let mut rng = StdRng::seed_from_u64(p.seed.wrapping_mul(1000) + index as u64);
    let me = p.client_id(index);
    let mut report = ClientReport {
        client: me.0,
        ..ClientReport::default()
    };
    for object in (index..p.objects).step_by(p.clients) {
        if let (code, None) = session.create(&p.key(object), p.object_size)? {
            report.error("create", format!("{} returned {code}", p.key(object)));
        }
    }
    let mut handles = (0..p.objects)
        .map(|o| use_when_created(session, &p.key(o)))
        .collect::<Result<Vec<_>, _>>()?;
    let pools = Pools::new(Some(Duration::from_secs(5)));
    let budget = p.ops_per_client();
    let mut copies = 0u64;
    while report.ops < budget {
        let object = rng.gen_range(0..p.objects);
        let h = &mut handles[object];
        report.ops += 1;
        report.accesses += 1;
        let wait = Duration::from_millis(rng.gen_range(0..=10));
        match h.access_timeout(Some(wait)) {
            Ok(()) => {}
            Err(e) if e.kind() == Some(ErrorKind::Timeout) => {
                report.access_timeouts += 1;
                continue;
            }
            Err(e) => {
                report.error("access", e);
                continue;
            }
        }
        for _ in 0..rng.gen_range(1..=3) {
            let len = rng.gen_range(1..=256u64);
            let offset = rng.gen_range(0..=p.object_size - len);
            report.ops += 1;
            if rng.gen_bool(0.5) {
                report.reads += 1;
                if let Err(e) = h.read(offset, len) {
                    report.error("read", e);
                }
            } else {
                report.writes += 1;
                let data: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
                match h.write(offset, &data).and_then(|_| h.read(offset, len)) {
                    Ok(back) if back == data => {}
                    Ok(_) => report.data_mismatches += 1,
                    Err(e) => report.error("write", e),
                }
            }
        }
        if rng.gen_bool(0.05) {
            copies += 1;
            report.ops += 1;
            report.copies += 1;
            let name = CdiKey::new(format!("stress-{}-copy{copies}", me.0)).expect("short key");
            match h.copy(&name) {
                Ok((ReturnCode::Success, Some(c))) => {
                    if let Err(e) = c.destroy() {
                        report.error("destroy copy", e);
                    }
                }
                Ok((code, _)) => report.error("copy", format!("returned {code}")),
                Err(e) => report.error("copy", e),
            }
        }
        let mut target = rng.gen_range(0..p.clients - 1);
        if target >= index {
            target += 1;
        }
        let stale = h.grant().cloned().expect("access succeeded");
        report.ops += 1;
        report.transfers += 1;
        match h.transfer(p.client_id(target)) {
            Ok(()) => probe_stale(&pools, h.key(), &stale, &mut report),
            Err(e) if e.kind() == Some(ErrorKind::TransferAborted) => {
                report.aborted += 1;
                let back = h.is_owner() && h.read(0, 1).is_ok();
                if !back {
                    report.lost_on_abort += 1;
                }
            }
            Err(e) => report.error("transfer", e),
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SnapshotStats {
    pub samples: u64,
    pub violations: u64,
    pub examples: Vec<String>,
}

/// Check snapshots until `stop` is set and at least `min` were taken.
pub fn sample_snapshots(controller: &Controller, stop: &AtomicBool, min: u64) -> SnapshotStats {
    let mut stats = SnapshotStats::default();
    while !stop.load(Ordering::Relaxed) || stats.samples < min {
        let found = check_snapshot(&controller.snapshot());
        stats.samples += 1;
        stats.violations += found.len() as u64;
        for v in found {
            if stats.examples.len() < 10 {
                stats.examples.push(v.to_string());
            }
        }
        thread::sleep(Duration::from_micros(200));
    }
    stats
}

/// Arm a random one-shot transfer fault on a random minion every `every`
/// until `stop` is set. Returns the number of faults armed.
pub fn inject_faults(cluster: &LocalCluster, stop: &AtomicBool, every: Duration, seed: u64) -> u64 {
    const KINDS: [MsgType; 4] = [
        MsgType::MinionRevoke,
        MsgType::MinionCopyPush,
        MsgType::MinionSetOwner,
        MsgType::MinionGrant,
    ];
    let mut rng = StdRng::seed_from_u64(seed);
    let mut armed = 0;
    while !stop.load(Ordering::Relaxed) {
        thread::sleep(every);
        let host = rng.gen_range(0..cluster.hosts());
        cluster.minion(host).faults().fail_next(KINDS[rng.gen_range(0..KINDS.len())]);
        armed += 1;
    }
    armed
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StressSummary {
    pub clients: Vec<ClientReport>,
    pub snapshots: SnapshotStats,
    pub faults_armed: u64,
    pub elapsed_ms: u64,
}

impl StressSummary {
    pub fn ops(&self) -> u64 {
        self.clients.iter().map(|c| c.ops).sum()
    }

    pub fn violations(&self) -> u64 {
        self.snapshots.violations + self.clients.iter().map(ClientReport::violations).sum::<u64>()
    }

    pub fn total(&self, f: impl Fn(&ClientReport) -> u64) -> u64 {
        self.clients.iter().map(f).sum()
    }
}

/// Run every client as a thread against `cluster`, spreading them over its hosts.
pub fn run_local(
    cluster: &LocalCluster,
    p: &StressParams,
    min_snapshots: u64,
    fault_every: Option<Duration>,
) -> Result<StressSummary, SdkError> {
    let started = Instant::now();
    let sessions = (0..p.clients)
        .map(|i| cluster.session(p.client_id(i).0, i % cluster.hosts()))
        .collect::<Result<Vec<_>, _>>()?;
    let stop = Arc::new(AtomicBool::new(false));
    thread::scope(|s| {
        let sampler = s.spawn(|| sample_snapshots(cluster.controller(), &stop, min_snapshots));
        let stop_ref = &stop;
        let injector = fault_every.map(|every| s.spawn(move || inject_faults(cluster, stop_ref, every, p.seed)));
        let clients: Vec<_> = sessions
            .iter()
            .enumerate()
            .map(|(i, session)| s.spawn(move || run_client(session, i, p)))
            .collect();
        let reports: Vec<_> = clients.into_iter().map(|c| c.join().expect("client panicked")).collect();
        stop.store(true, Ordering::Relaxed);
        let snapshots = sampler.join().expect("sampler panicked");
        let faults_armed = injector.map_or(0, |t| t.join().expect("injector panicked"));
        Ok(StressSummary {
            clients: reports.into_iter().collect::<Result<_, _>>()?,
            snapshots,
            faults_armed,
            elapsed_ms: started.elapsed().as_millis() as u64,
        })
    })
}
