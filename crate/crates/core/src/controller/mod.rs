//! The coordination plane: container registry, authoritative object
//! directory and driver of minion directives.
//!
//! Directory state lives behind one mutex that is only held for short,
//! non-blocking critical sections, so audit snapshots are point-in-time.
//! Operations that talk to minions additionally hold a per-key operation lock
//! for their whole duration, which serializes everything done to one key while
//! leaving other keys free to proceed.

#![allow(clippy::result_large_err)]

pub mod audit;
pub mod invariants;

use std::collections::{BTreeMap, HashMap};
use std::io::{self, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::model::{CdiKey, CdiObject, ContainerId, HostId};
use crate::net::{NetError, Pools, Server};
use crate::transfer::{
    steps_for, validate_transfer, TransferDecision, TransferPhase, TransferRecord, TransferStep,
};
use crate::wire::{
    self, DirectoryEntry, Envelope, ErrorKind, Grant, Message, Reply, WireError, DEFAULT_MAX_FRAME,
};

pub use audit::{AuditEvent, TransferTrace};
pub use invariants::{check_snapshot, Violation};
use audit::AuditLog;

pub const DEFAULT_PHASE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct ControllerConfig {
    /// Bound on each minion directive; exceeding it aborts the transfer.
    pub phase_timeout: Duration,
    pub audit_log: Option<PathBuf>,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            phase_timeout: DEFAULT_PHASE_TIMEOUT,
            audit_log: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Registration {
    pub container_endpoint: String,
    pub host_endpoint: String,
}

struct Entry {
    object: CdiObject,
    /// Endpoint of the minion holding the authoritative segment.
    minion: String,
    grant: Option<(ContainerId, Grant)>,
    transfer: Option<TransferRecord>,
}

type WaitResult = Result<Grant, Reply>;

struct Waiter {
    id: u64,
    container: ContainerId,
    tx: mpsc::Sender<WaitResult>,
}

#[derive(Default)]
struct Directory {
    registry: HashMap<ContainerId, Registration>,
    entries: BTreeMap<CdiKey, Entry>,
    waiters: HashMap<CdiKey, Vec<Waiter>>,
    hosts: HashMap<String, String>,
    next_waiter: u64,
}

impl Directory {
    fn release(&mut self, key: &CdiKey, container: ContainerId, grant: &Grant) {
        if let Some(ws) = self.waiters.get_mut(key) {
            ws.retain(|w| {
                if w.container == container {
                    let _ = w.tx.send(Ok(grant.clone()));
                    false
                } else {
                    true
                }
            });
        }
    }

    fn host_of(&self, minion: &str) -> HostId {
        HostId(self.hosts.get(minion).cloned().unwrap_or_else(|| minion.to_string()))
    }
}

struct Inner {
    dir: Mutex<Directory>,
    ops: Mutex<HashMap<CdiKey, Arc<Mutex<()>>>>,
    minions: Pools,
    audit: AuditLog,
}

#[derive(Debug)]
enum StepError {
    Unreachable(NetError),
    Rejected(Reply),
}

impl std::fmt::Display for StepError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StepError::Unreachable(e) => write!(f, "minion unreachable: {e}"),
            StepError::Rejected(r) => write!(
                f,
                "minion rejected: {:?} {}",
                r.error,
                r.detail.as_deref().unwrap_or("")
            ),
        }
    }
}

impl StepError {
    fn kind(&self) -> ErrorKind {
        match self {
            StepError::Unreachable(e) if e.is_timeout() => ErrorKind::Timeout,
            StepError::Unreachable(_) => ErrorKind::Internal,
            StepError::Rejected(r) => r.error.unwrap_or(ErrorKind::Internal),
        }
    }
}

fn valid_endpoint(s: &str) -> bool {
    s.rsplit_once(':')
        .is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok())
}

/// Handle to controller state; cheap to clone.
#[derive(Clone)]
pub struct Controller {
    inner: Arc<Inner>,
}

impl Controller {
    pub fn new(config: ControllerConfig) -> io::Result<Controller> {
        Ok(Controller {
            inner: Arc::new(Inner {
                dir: Mutex::new(Directory::default()),
                ops: Mutex::new(HashMap::new()),
                minions: Pools::new(Some(config.phase_timeout)),
                audit: AuditLog::new(config.audit_log.as_deref())?,
            }),
        })
    }

    fn op_lock(&self, key: &CdiKey) -> Arc<Mutex<()>> {
        self.inner
            .ops
            .lock()
            .unwrap()
            .entry(key.clone())
            .or_default()
            .clone()
    }

    fn minion_call(&self, endpoint: &str, msg: Message) -> Result<Reply, StepError> {
        let reply = self
            .inner
            .minions
            .get(endpoint)
            .call_reply(msg)
            .map_err(StepError::Unreachable)?;
        if reply.is_ok() {
            Ok(reply)
        } else {
            Err(StepError::Rejected(reply))
        }
    }

    fn record(&self, key: &CdiKey, from: Option<ContainerId>, to: Option<ContainerId>, phase: &str) {
        self.inner.audit.record(key, from, to, phase);
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.inner.audit.events()
    }

    pub fn registration(&self, container: ContainerId) -> Option<Registration> {
        self.inner.dir.lock().unwrap().registry.get(&container).cloned()
    }

    /// Number of parked access waits on `key`.
    pub fn waiting(&self, key: &CdiKey) -> usize {
        self.inner
            .dir
            .lock()
            .unwrap()
            .waiters
            .get(key)
            .map_or(0, Vec::len)
    }

    pub fn register(
        &self,
        container: ContainerId,
        container_endpoint: &str,
        host_endpoint: &str,
    ) -> Reply {
        if !valid_endpoint(container_endpoint) || !valid_endpoint(host_endpoint) {
            return Reply::error(
                ErrorKind::MalformedEndpoint,
                format!("bad endpoint {container_endpoint:?} / {host_endpoint:?}"),
            );
        }
        let reg = Registration {
            container_endpoint: container_endpoint.to_string(),
            host_endpoint: host_endpoint.to_string(),
        };
        let old = self.inner.dir.lock().unwrap().registry.insert(container, reg);
        if old.is_some() {
            log::info!("container {container} re-registered at {container_endpoint}");
        }
        Reply::ok()
    }

    pub fn create(&self, caller: ContainerId, key: &CdiKey, size: u64) -> Reply {
        let lock = self.op_lock(key);
        let _op = lock.lock().unwrap();
        let minion = {
            let dir = self.inner.dir.lock().unwrap();
            let Some(reg) = dir.registry.get(&caller) else {
                return Reply::error(ErrorKind::Unregistered, format!("container {caller}"));
            };
            if dir.entries.contains_key(key) {
                return Reply::code(0);
            }
            reg.host_endpoint.clone()
        };
        if size == 0 {
            return Reply::error(ErrorKind::BadRequest, "size must be positive");
        }
        let grant = match self.place(&minion, key, size, None, caller) {
            Ok(g) => g,
            Err(e) => return Reply::error(e.kind(), e.to_string()),
        };
        let mut dir = self.inner.dir.lock().unwrap();
        let host = dir.host_of(&minion);
        dir.entries.insert(
            key.clone(),
            Entry {
                object: CdiObject::new(key.clone(), size, caller, host),
                minion,
                grant: Some((caller, grant.clone())),
                transfer: None,
            },
        );
        self.record(key, None, Some(caller), audit::CREATE);
        Reply::ok().with_grant(grant)
    }

    /// Allocate, stamp the owner and grant it; rolls the allocation back on failure.
    fn place(
        &self,
        minion: &str,
        key: &CdiKey,
        size: u64,
        clone_from: Option<&CdiKey>,
        owner: ContainerId,
    ) -> Result<Grant, StepError> {
        self.minion_call(
            minion,
            Message::MinionAllocate {
                key: key.clone(),
                size,
                clone_from: clone_from.cloned(),
            },
        )?;
        let granted = self
            .minion_call(
                minion,
                Message::MinionSetOwner {
                    key: key.clone(),
                    owner,
                },
            )
            .and_then(|_| {
                self.minion_call(
                    minion,
                    Message::MinionGrant {
                        key: key.clone(),
                        container: owner,
                    },
                )
            })
            .and_then(|r| {
                r.grant
                    .ok_or_else(|| StepError::Rejected(Reply::error(ErrorKind::Internal, "grant missing")))
            });
        if granted.is_err() {
            let _ = self.minion_call(minion, Message::MinionDeallocate { key: key.clone() });
        }
        granted
    }

    pub fn use_key(&self, caller: ContainerId, key: &CdiKey) -> Reply {
        let mut dir = self.inner.dir.lock().unwrap();
        if !dir.registry.contains_key(&caller) {
            return Reply::error(ErrorKind::Unregistered, format!("container {caller}"));
        }
        match dir.entries.get_mut(key) {
            Some(e) => {
                e.object.join(caller);
                Reply::ok()
            }
            None => Reply::code(0),
        }
    }

    pub fn copy(&self, caller: ContainerId, src: &CdiKey, new_key: &CdiKey) -> Reply {
        if src == new_key {
            return Reply::code(0);
        }
        let (first, second) = if src < new_key { (src, new_key) } else { (new_key, src) };
        let (l1, l2) = (self.op_lock(first), self.op_lock(second));
        let _g1 = l1.lock().unwrap();
        let _g2 = l2.lock().unwrap();
        let (minion, capacity) = {
            let dir = self.inner.dir.lock().unwrap();
            let Some(e) = dir.entries.get(src) else {
                return Reply::error(ErrorKind::UnknownKey, src.to_string());
            };
            if e.object.owner != caller {
                return Reply::error(ErrorKind::NotOwner, format!("{src} is owned by {}", e.object.owner));
            }
            if dir.entries.contains_key(new_key) {
                return Reply::code(0);
            }
            (e.minion.clone(), e.object.capacity)
        };
        let grant = match self.place(&minion, new_key, capacity, Some(src), caller) {
            Ok(g) => g,
            Err(e) => return Reply::error(e.kind(), e.to_string()),
        };
        let mut dir = self.inner.dir.lock().unwrap();
        let host = dir.host_of(&minion);
        dir.entries.insert(
            new_key.clone(),
            Entry {
                object: CdiObject::new(new_key.clone(), capacity, caller, host),
                minion,
                grant: Some((caller, grant.clone())),
                transfer: None,
            },
        );
        self.record(new_key, None, Some(caller), audit::CREATE);
        Reply::ok().with_grant(grant)
    }

    pub fn transfer(&self, caller: ContainerId, key: &CdiKey, target: ContainerId) -> Reply {
        if let Some(e) = self.inner.dir.lock().unwrap().entries.get(key) {
            if e.transfer.is_some() {
                return Reply::error(ErrorKind::TransferInFlight, key.to_string());
            }
        }
        let lock = self.op_lock(key);
        let _op = lock.lock().unwrap();
        let (rec, src, dst) = {
            let mut dir = self.inner.dir.lock().unwrap();
            let target_reg = dir.registry.get(&target).cloned();
            let Some(e) = dir.entries.get_mut(key) else {
                return Reply::error(ErrorKind::UnknownKey, key.to_string());
            };
            match validate_transfer(&e.object, caller, target, target_reg.is_some()) {
                TransferDecision::DenyNotOwner => {
                    return Reply::error(
                        ErrorKind::NotOwner,
                        format!("{key} is owned by {}", e.object.owner),
                    )
                }
                TransferDecision::DenyUnregisteredTarget => {
                    return Reply::error(ErrorKind::UnknownTarget, format!("container {target}"))
                }
                TransferDecision::AllowNoopSelf => return Reply::ok(),
                TransferDecision::Allow => {}
            }
            let dst = target_reg.unwrap().host_endpoint;
            let rec = TransferRecord::new(key.clone(), caller, target, dst == e.minion);
            e.transfer = Some(rec.clone());
            (rec, e.minion.clone(), dst)
        };
        self.drive(rec, &src, &dst)
    }

    fn drive(&self, mut rec: TransferRecord, src: &str, dst: &str) -> Reply {
        let key = rec.key.clone();
        for &step in steps_for(rec.same_host) {
            let (endpoint, msg) = match step {
                TransferStep::RevokeSrc => (src, Message::MinionRevoke { key: key.clone() }),
                TransferStep::CopyPush => (
                    src,
                    Message::MinionCopyPush {
                        key: key.clone(),
                        dest_endpoint: dst.to_string(),
                    },
                ),
                TransferStep::SetOwnerSrc => (
                    src,
                    Message::MinionSetOwner {
                        key: key.clone(),
                        owner: rec.to,
                    },
                ),
                TransferStep::SetOwnerDst => (
                    dst,
                    Message::MinionSetOwner {
                        key: key.clone(),
                        owner: rec.to,
                    },
                ),
                TransferStep::GrantDst => (
                    dst,
                    Message::MinionGrant {
                        key: key.clone(),
                        container: rec.to,
                    },
                ),
            };
            let reply = match self.minion_call(endpoint, msg) {
                Ok(r) => r,
                Err(e) => return self.abort(&rec, src, dst, e),
            };
            let next = match rec.advance(step) {
                Ok(r) => r,
                Err(v) => {
                    return self.abort(&rec, src, dst, StepError::Rejected(Reply::error(
                        ErrorKind::ProtocolViolation,
                        v.to_string(),
                    )))
                }
            };
            let grant = match (step, reply.grant) {
                (TransferStep::GrantDst, None) => {
                    let e = StepError::Rejected(Reply::error(ErrorKind::Internal, "grant missing"));
                    return self.abort(&rec, src, dst, e);
                }
                (_, g) => g,
            };
            rec = next;
            let mut dir = self.inner.dir.lock().unwrap();
            let Directory { entries, .. } = &mut *dir;
            let e = entries.get_mut(&key).expect("entry pinned by op lock");
            if step == TransferStep::RevokeSrc {
                e.grant = None;
            }
            self.record(&key, Some(rec.from), Some(rec.to), step.name());
            if rec.is_complete() {
                let grant = grant.expect("checked above");
                e.object.owner = rec.to;
                e.object.join(rec.to);
                e.minion = dst.to_string();
                e.grant = Some((rec.to, grant.clone()));
                e.transfer = None;
                let host = dir.host_of(dst);
                dir.entries.get_mut(&key).unwrap().object.host = host;
                dir.release(&key, rec.to, &grant);
            } else {
                e.transfer = Some(rec.clone());
            }
        }
        if !rec.same_host {
            if let Err(e) = self.minion_call(src, Message::MinionDeallocate { key: key.clone() }) {
                log::warn!("source segment of {key} on {src} not released: {e}");
            }
        }
        Reply::ok()
    }

    /// Return ownership and access to the source after a failed step.
    fn abort(&self, rec: &TransferRecord, src: &str, dst: &str, cause: StepError) -> Reply {
        log::warn!(
            "transfer of {} from {} to {} aborted in {:?}: {cause}",
            rec.key,
            rec.from,
            rec.to,
            rec.phase
        );
        let key = &rec.key;
        let plan = rec.abort_plan();
        // A copy may be partial or still in flight even before `Copied`.
        if !rec.same_host && rec.phase >= TransferPhase::RevokedSource {
            let discarded = self.minion_call(dst, Message::MinionDeallocate { key: key.clone() });
            if plan.discard_destination {
                if let Err(e) = discarded {
                    log::warn!("destination copy of {key} on {dst} not discarded: {e}");
                }
            }
        }
        if plan.reset_source_owner {
            let _ = self.minion_call(
                src,
                Message::MinionSetOwner {
                    key: key.clone(),
                    owner: plan.owner,
                },
            );
        }
        let grant = self
            .minion_call(src, Message::MinionRevoke { key: key.clone() })
            .and_then(|_| {
                self.minion_call(
                    src,
                    Message::MinionGrant {
                        key: key.clone(),
                        container: plan.owner,
                    },
                )
            })
            .ok()
            .and_then(|r| r.grant);
        let mut dir = self.inner.dir.lock().unwrap();
        if let Some(e) = dir.entries.get_mut(key) {
            e.transfer = None;
            e.grant = grant.clone().map(|g| (plan.owner, g));
        }
        self.record(key, Some(rec.from), Some(rec.to), audit::ABORT);
        if let Some(g) = &grant {
            dir.release(key, plan.owner, g);
        }
        let mut reply = Reply::error(ErrorKind::TransferAborted, cause.to_string());
        reply.grant = grant;
        reply
    }

    /// Block until `caller` owns `key` with access granted.
    pub fn access_wait(
        &self,
        caller: ContainerId,
        key: &CdiKey,
        timeout: Option<Duration>,
    ) -> Result<Grant, Reply> {
        let (id, rx) = {
            let mut dir = self.inner.dir.lock().unwrap();
            let Some(e) = dir.entries.get(key) else {
                return Err(Reply::error(ErrorKind::UnknownKey, key.to_string()));
            };
            if !e.object.container_group.contains(&caller) {
                return Err(Reply::error(
                    ErrorKind::NotInGroup,
                    format!("container {caller} has not used {key}"),
                ));
            }
            if e.object.owner == caller && e.transfer.is_none() {
                match &e.grant {
                    Some((holder, g)) if *holder == caller => return Ok(g.clone()),
                    _ => {
                        drop(dir);
                        return self.regrant(caller, key);
                    }
                }
            }
            let (tx, rx) = mpsc::channel();
            let id = dir.next_waiter;
            dir.next_waiter += 1;
            dir.waiters.entry(key.clone()).or_default().push(Waiter {
                id,
                container: caller,
                tx,
            });
            (id, rx)
        };
        let got = match timeout {
            Some(t) => rx.recv_timeout(t),
            None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
        };
        match got {
            Ok(r) => r,
            Err(_) => {
                let mut dir = self.inner.dir.lock().unwrap();
                if let Some(ws) = dir.waiters.get_mut(key) {
                    ws.retain(|w| w.id != id);
                }
                drop(dir);
                // A release may have landed between the timeout and the removal.
                rx.try_recv().unwrap_or_else(|_| {
                    Err(Reply::error(ErrorKind::Timeout, format!("waiting for {key}")))
                })
            }
        }
    }

    /// Re-issue a grant to an owner whose grant was lost, e.g. when an abort
    /// could not reach the source minion.
    fn regrant(&self, caller: ContainerId, key: &CdiKey) -> Result<Grant, Reply> {
        let lock = self.op_lock(key);
        let _op = lock.lock().unwrap();
        let minion = {
            let dir = self.inner.dir.lock().unwrap();
            match dir.entries.get(key) {
                Some(e) if e.object.owner == caller => match &e.grant {
                    Some((h, g)) if *h == caller => return Ok(g.clone()),
                    _ => e.minion.clone(),
                },
                Some(_) => return Err(Reply::error(ErrorKind::NotOwner, key.to_string())),
                None => return Err(Reply::error(ErrorKind::UnknownKey, key.to_string())),
            }
        };
        let grant = self
            .minion_call(&minion, Message::MinionRevoke { key: key.clone() })
            .and_then(|_| {
                self.minion_call(
                    &minion,
                    Message::MinionGrant {
                        key: key.clone(),
                        container: caller,
                    },
                )
            })
            .map_err(|e| Reply::error(e.kind(), e.to_string()))?
            .grant
            .ok_or_else(|| Reply::error(ErrorKind::Internal, "grant missing"))?;
        let mut dir = self.inner.dir.lock().unwrap();
        if let Some(e) = dir.entries.get_mut(key) {
            e.grant = Some((caller, grant.clone()));
        }
        Ok(grant)
    }

    pub fn destroy(&self, caller: ContainerId, key: &CdiKey) -> Reply {
        if let Some(e) = self.inner.dir.lock().unwrap().entries.get(key) {
            if e.transfer.is_some() {
                return Reply::error(ErrorKind::TransferInFlight, key.to_string());
            }
        }
        let lock = self.op_lock(key);
        let _op = lock.lock().unwrap();
        let minion = {
            let dir = self.inner.dir.lock().unwrap();
            let Some(e) = dir.entries.get(key) else {
                return Reply::error(ErrorKind::UnknownKey, key.to_string());
            };
            if e.object.owner != caller {
                return Reply::error(ErrorKind::NotOwner, format!("{key} is owned by {}", e.object.owner));
            }
            e.minion.clone()
        };
        match self.minion_call(&minion, Message::MinionDeallocate { key: key.clone() }) {
            Ok(_) => {}
            Err(StepError::Rejected(r)) if r.error == Some(ErrorKind::UnknownKey) => {}
            Err(e) => return Reply::error(e.kind(), e.to_string()),
        }
        let mut dir = self.inner.dir.lock().unwrap();
        dir.entries.remove(key);
        for w in dir.waiters.remove(key).unwrap_or_default() {
            let _ = w.tx.send(Err(Reply::error(
                ErrorKind::DestroyedWhileWaiting,
                key.to_string(),
            )));
        }
        self.record(key, Some(caller), None, audit::DESTROY);
        Reply::ok()
    }

    /// Point-in-time copy of the directory.
    pub fn snapshot(&self) -> Vec<DirectoryEntry> {
        let dir = self.inner.dir.lock().unwrap();
        dir.entries
            .values()
            .map(|e| DirectoryEntry {
                key: e.object.key.clone(),
                capacity: e.object.capacity,
                owner: e.object.owner,
                container_group: e.object.container_group.clone(),
                host: e.object.host.clone(),
                holder: e.grant.as_ref().map(|(h, _)| *h),
                transfer: e.transfer.clone(),
            })
            .collect()
    }

    /// Handle one request. `AccessWait` blocks the calling thread.
    pub fn handle(&self, message: Message) -> Reply {
        match message {
            Message::Register {
                container,
                container_endpoint,
                host_endpoint,
            } => self.register(container, &container_endpoint, &host_endpoint),
            Message::Create {
                container,
                key,
                size,
            } => self.create(container, &key, size),
            Message::Use { container, key } => self.use_key(container, &key),
            Message::Copy {
                container,
                key,
                new_key,
            } => self.copy(container, &key, &new_key),
            Message::Transfer {
                container,
                key,
                target,
            } => self.transfer(container, &key, target),
            Message::Destroy { container, key } => self.destroy(container, &key),
            Message::AccessWait {
                container,
                key,
                timeout_ms,
            } => match self.access_wait(container, &key, timeout_ms.map(Duration::from_millis)) {
                Ok(g) => Reply::ok().with_grant(g),
                Err(r) => r,
            },
            Message::Audit => Reply {
                entries: self.snapshot(),
                ..Reply::ok()
            },
            Message::MinionHello { host_id, endpoint } => {
                log::info!("minion {host_id} at {endpoint}");
                self.inner.dir.lock().unwrap().hosts.insert(endpoint, host_id);
                Reply::ok()
            }
            other => Reply::error(
                ErrorKind::BadRequest,
                format!("controller does not handle {:?}", other.msg_type()),
            ),
        }
    }

    fn serve_connection(&self, stream: TcpStream) {
        let writer = match stream.try_clone() {
            Ok(w) => Arc::new(Mutex::new(w)),
            Err(e) => {
                log::warn!("controller: {e}");
                return;
            }
        };
        let mut reader = BufReader::with_capacity(64 * 1024, stream);
        loop {
            let env = match wire::read_envelope(&mut reader, DEFAULT_MAX_FRAME) {
                Ok(env) => env,
                Err(WireError::Closed) => return,
                Err(e) => {
                    log::debug!("controller: closing connection: {e}");
                    return;
                }
            };
            let id = env.request_id;
            match env.message {
                Message::AccessWait {
                    container,
                    key,
                    timeout_ms,
                } => {
                    let me = self.clone();
                    let writer = writer.clone();
                    thread::spawn(move || {
                        let timeout = timeout_ms.map(Duration::from_millis);
                        let msg = match me.access_wait(container, &key, timeout) {
                            Ok(grant) => Message::AccessGrantNotify { key, grant },
                            Err(r) => Message::Reply(r),
                        };
                        let _ = send(&writer, Envelope::new(id, msg));
                    });
                }
                other => {
                    let reply = self.handle(other);
                    if send(&writer, Envelope::new(id, Message::Reply(reply))).is_err() {
                        return;
                    }
                }
            }
        }
    }

    pub fn serve(&self, listener: TcpListener) -> io::Result<ControllerServer> {
        let me = self.clone();
        let server = Server::spawn(listener, "controller", move |s| me.serve_connection(s))?;
        Ok(ControllerServer {
            controller: self.clone(),
            server,
        })
    }
}

fn send(writer: &Mutex<TcpStream>, env: Envelope) -> Result<(), WireError> {
    let frame = wire::encode(&env)?;
    writer.lock().unwrap().write_all(&frame)?;
    Ok(())
}

pub struct ControllerServer {
    controller: Controller,
    server: Server,
}

impl ControllerServer {
    pub fn controller(&self) -> &Controller {
        &self.controller
    }

    pub fn endpoint(&self) -> String {
        self.server.local_addr().to_string()
    }

    pub fn shutdown(&mut self) {
        self.server.shutdown();
    }
}
