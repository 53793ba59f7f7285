//! Per-host agent: owns storage segments, enforces that only the granted
//! container reaches them, and performs cross-host bulk copies on the
//! controller's orders.

mod region;

use std::collections::HashMap;
use std::io::{self, Read};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

pub use region::ShmRegion;

use crate::model::{AccessToken, CdiKey, ContainerId};
use crate::net::{Connection, NetError, Pools, Server};
use crate::wire::{
    self, BulkError, Counters, Envelope, ErrorKind, Grant, Message, MsgType, Reply, WireError,
};

pub const DEFAULT_BUDGET: u64 = 1 << 30;
pub const DEFAULT_IO_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct MinionConfig {
    pub host_id: String,
    /// Total bytes of live segments this minion may hold.
    pub budget: u64,
    /// Directory of the shared-memory namespace; a private subdirectory is created inside.
    pub shm_dir: PathBuf,
    /// Endpoint clients and peers should use; defaults to the bound address.
    pub advertise: Option<String>,
    pub io_timeout: Duration,
}

impl MinionConfig {
    pub fn new(host_id: impl Into<String>) -> Self {
        MinionConfig {
            host_id: host_id.into(),
            budget: DEFAULT_BUDGET,
            shm_dir: default_shm_dir(),
            advertise: None,
            io_timeout: DEFAULT_IO_TIMEOUT,
        }
    }
}

pub fn default_shm_dir() -> PathBuf {
    let shm = Path::new("/dev/shm");
    if shm.is_dir() {
        shm.to_path_buf()
    } else {
        std::env::temp_dir()
    }
}

#[derive(Debug, Error)]
pub enum MinionError {
    #[error("unknown key {0}")]
    UnknownKey(CdiKey),
    #[error("segment {0} already allocated")]
    DuplicateKey(CdiKey),
    #[error("budget exceeded: {requested} bytes requested, {available} available")]
    BudgetExceeded { requested: u64, available: u64 },
    #[error("segment size must be positive")]
    InvalidSize,
    #[error("segment {key} is already granted to container {holder}")]
    AlreadyGranted { key: CdiKey, holder: ContainerId },
    #[error("segment {0} is still granted")]
    StillGranted(CdiKey),
    #[error("access denied to {0}")]
    AccessDenied(CdiKey),
    #[error("range {offset}+{len} exceeds capacity {capacity}")]
    OutOfBounds { offset: u64, len: u64, capacity: u64 },
    #[error("copy of {key} failed: {reason}")]
    CopyFailed { key: CdiKey, reason: String },
    #[error("injected failure")]
    Injected,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl MinionError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            MinionError::UnknownKey(_) => ErrorKind::UnknownKey,
            MinionError::DuplicateKey(_) => ErrorKind::DuplicateKey,
            MinionError::BudgetExceeded { .. } => ErrorKind::BudgetExceeded,
            MinionError::InvalidSize => ErrorKind::BadRequest,
            MinionError::AlreadyGranted { .. } => ErrorKind::ProtocolViolation,
            MinionError::StillGranted(_) => ErrorKind::StillGranted,
            MinionError::AccessDenied(_) => ErrorKind::AccessDenied,
            MinionError::OutOfBounds { .. } => ErrorKind::OutOfBounds,
            MinionError::CopyFailed { .. } => ErrorKind::CopyFailed,
            MinionError::Injected | MinionError::Io(_) => ErrorKind::Internal,
        }
    }
}

struct Segment {
    key: CdiKey,
    region: ShmRegion,
    token: Option<AccessToken>,
    granted_to: Option<ContainerId>,
    owner: Option<ContainerId>,
    counters: Counters,
    released: bool,
}

impl Segment {
    fn capacity(&self) -> u64 {
        self.region.len() as u64
    }

    fn check_token(&self, token: AccessToken) -> Result<(), MinionError> {
        match self.token {
            Some(t) if t == token && !self.released => Ok(()),
            _ => Err(MinionError::AccessDenied(self.key.clone())),
        }
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<(), MinionError> {
        match offset.checked_add(len) {
            Some(end) if end <= self.capacity() => Ok(()),
            _ => Err(MinionError::OutOfBounds {
                offset,
                len,
                capacity: self.capacity(),
            }),
        }
    }
}

/// Snapshot of one segment for tests and diagnostics.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentInfo {
    pub key: CdiKey,
    pub capacity: u64,
    pub granted_to: Option<ContainerId>,
    pub owner: Option<ContainerId>,
    pub counters: Counters,
}

/// Test hooks for provoking failures.
#[derive(Default)]
pub struct Faults {
    corrupt_next_push: AtomicBool,
    corrupt_every: AtomicU64,
    pushes: AtomicU64,
    fail_next: Mutex<Vec<MsgType>>,
    delay_next: Mutex<Vec<(MsgType, Duration)>>,
}

impl Faults {
    /// Flip one bit of the next outgoing bulk copy.
    pub fn corrupt_next_push(&self) {
        self.corrupt_next_push.store(true, Ordering::SeqCst);
    }

    /// Corrupt every `n`th outgoing bulk copy (0 disables).
    pub fn corrupt_every(&self, n: u64) {
        self.corrupt_every.store(n, Ordering::SeqCst);
    }

    /// Fail the next directive of the given type with an internal error.
    pub fn fail_next(&self, t: MsgType) {
        self.fail_next.lock().unwrap().push(t);
    }

    /// Stall the next directive of the given type before executing it.
    pub fn delay_next(&self, t: MsgType, by: Duration) {
        self.delay_next.lock().unwrap().push((t, by));
    }

    fn take_corruption(&self) -> bool {
        let n = self.pushes.fetch_add(1, Ordering::SeqCst) + 1;
        let every = self.corrupt_every.load(Ordering::SeqCst);
        self.corrupt_next_push.swap(false, Ordering::SeqCst) || (every > 0 && n.is_multiple_of(every))
    }

    fn before(&self, t: MsgType) -> Result<(), MinionError> {
        let delay = {
            let mut d = self.delay_next.lock().unwrap();
            d.iter().position(|(m, _)| *m == t).map(|i| d.remove(i).1)
        };
        if let Some(by) = delay {
            std::thread::sleep(by);
        }
        let mut f = self.fail_next.lock().unwrap();
        if let Some(i) = f.iter().position(|m| *m == t) {
            f.remove(i);
            return Err(MinionError::Injected);
        }
        Ok(())
    }
}

struct State {
    config: MinionConfig,
    dir: PathBuf,
    endpoint: Mutex<String>,
    segments: Mutex<HashMap<CdiKey, Arc<Mutex<Segment>>>>,
    used: Mutex<u64>,
    totals_in: AtomicU64,
    totals_out: AtomicU64,
    peers: Pools,
    faults: Faults,
}

impl Drop for State {
    fn drop(&mut self) {
        self.segments.lock().unwrap().clear();
        let _ = std::fs::remove_dir_all(&self.dir);
    }
}

/// Handle to a minion's state; cheap to clone.
#[derive(Clone)]
pub struct Minion {
    state: Arc<State>,
}

impl Minion {
    pub fn new(config: MinionConfig) -> io::Result<Minion> {
        let safe_host: String = config
            .host_id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
            .collect();
        let dir = config.shm_dir.join(format!(
            "cdi-{safe_host}-{}-{:08x}",
            std::process::id(),
            rand::random::<u32>()
        ));
        std::fs::create_dir_all(&dir)?;
        let endpoint = config.advertise.clone().unwrap_or_default();
        let peers = Pools::new(Some(config.io_timeout));
        Ok(Minion {
            state: Arc::new(State {
                config,
                dir,
                endpoint: Mutex::new(endpoint),
                segments: Mutex::new(HashMap::new()),
                used: Mutex::new(0),
                totals_in: AtomicU64::new(0),
                totals_out: AtomicU64::new(0),
                peers,
                faults: Faults::default(),
            }),
        })
    }

    pub fn host_id(&self) -> &str {
        &self.state.config.host_id
    }

    pub fn endpoint(&self) -> String {
        self.state.endpoint.lock().unwrap().clone()
    }

    pub fn faults(&self) -> &Faults {
        &self.state.faults
    }

    pub fn shm_dir(&self) -> &Path {
        &self.state.dir
    }

    /// `(used, max)` budget bytes.
    pub fn budget(&self) -> (u64, u64) {
        (*self.state.used.lock().unwrap(), self.state.config.budget)
    }

    pub fn totals(&self) -> Counters {
        Counters {
            payload_bytes_in: self.state.totals_in.load(Ordering::SeqCst),
            payload_bytes_out: self.state.totals_out.load(Ordering::SeqCst),
        }
    }

    fn segment(&self, key: &CdiKey) -> Result<Arc<Mutex<Segment>>, MinionError> {
        self.state
            .segments
            .lock()
            .unwrap()
            .get(key)
            .cloned()
            .ok_or_else(|| MinionError::UnknownKey(key.clone()))
    }

    fn with_segment<T>(
        &self,
        key: &CdiKey,
        f: impl FnOnce(&mut Segment) -> Result<T, MinionError>,
    ) -> Result<T, MinionError> {
        let seg = self.segment(key)?;
        let mut seg = seg.lock().unwrap();
        if seg.released {
            return Err(MinionError::UnknownKey(key.clone()));
        }
        f(&mut seg)
    }

    pub fn segments(&self) -> Vec<SegmentInfo> {
        let all: Vec<_> = self.state.segments.lock().unwrap().values().cloned().collect();
        let mut out: Vec<SegmentInfo> = all
            .iter()
            .map(|s| {
                let s = s.lock().unwrap();
                SegmentInfo {
                    key: s.key.clone(),
                    capacity: s.capacity(),
                    granted_to: s.granted_to,
                    owner: s.owner,
                    counters: s.counters,
                }
            })
            .collect();
        out.sort_by(|a, b| a.key.cmp(&b.key));
        out
    }

    pub fn segment_info(&self, key: &CdiKey) -> Result<SegmentInfo, MinionError> {
        self.with_segment(key, |s| {
            Ok(SegmentInfo {
                key: s.key.clone(),
                capacity: s.capacity(),
                granted_to: s.granted_to,
                owner: s.owner,
                counters: s.counters,
            })
        })
    }

    fn debit(&self, size: u64) -> Result<(), MinionError> {
        let mut used = self.state.used.lock().unwrap();
        let available = self.state.config.budget - *used;
        if size > available {
            return Err(MinionError::BudgetExceeded {
                requested: size,
                available,
            });
        }
        *used += size;
        Ok(())
    }

    fn credit(&self, size: u64) {
        *self.state.used.lock().unwrap() -= size;
    }

    fn sealed_path(&self) -> PathBuf {
        self.state
            .dir
            .join(format!("sealed-{:032x}", rand::random::<u128>()))
    }

    /// Reserve a zero-filled segment, optionally initialized from another local segment.
    pub fn allocate(
        &self,
        key: &CdiKey,
        size: u64,
        clone_from: Option<&CdiKey>,
    ) -> Result<(), MinionError> {
        if size == 0 || size > usize::MAX as u64 {
            return Err(MinionError::InvalidSize);
        }
        let source = clone_from.map(|src| self.segment(src)).transpose()?;
        let mut segments = self.state.segments.lock().unwrap();
        if segments.contains_key(key) {
            return Err(MinionError::DuplicateKey(key.clone()));
        }
        self.debit(size)?;
        let region = match ShmRegion::create(self.sealed_path(), size as usize) {
            Ok(r) => r,
            Err(e) => {
                self.credit(size);
                return Err(e.into());
            }
        };
        if let Some(src) = source {
            let src = src.lock().unwrap();
            if src.released {
                self.credit(size);
                return Err(MinionError::UnknownKey(src.key.clone()));
            }
            let n = src.region.len().min(region.len());
            let mut buf = vec![0u8; n];
            src.region.read_at(0, &mut buf);
            region.write_at(0, &buf);
        }
        region.set_mode(0o000)?;
        segments.insert(
            key.clone(),
            Arc::new(Mutex::new(Segment {
                key: key.clone(),
                region,
                token: None,
                granted_to: None,
                owner: None,
                counters: Counters::default(),
                released: false,
            })),
        );
        Ok(())
    }

    /// Grant exclusive access to `container`, issuing a fresh token and
    /// exposing the segment under a name derived from it.
    pub fn grant(&self, key: &CdiKey, container: ContainerId) -> Result<Grant, MinionError> {
        let endpoint = self.endpoint();
        let dir = self.state.dir.clone();
        self.with_segment(key, |s| {
            if let Some(holder) = s.granted_to {
                return Err(MinionError::AlreadyGranted {
                    key: key.clone(),
                    holder,
                });
            }
            let token = AccessToken::random();
            s.region.rename(dir.join(format!("seg-{}", token.to_hex())))?;
            s.region.set_mode(0o600)?;
            s.token = Some(token);
            s.granted_to = Some(container);
            Ok(Grant {
                token,
                segment: s.region.path().to_string_lossy().into_owned(),
                minion: endpoint,
                host_id: self.host_id().to_string(),
                capacity: s.capacity(),
            })
        })
    }

    /// Withdraw the current grant. Idempotent on ungranted segments.
    pub fn revoke(&self, key: &CdiKey) -> Result<(), MinionError> {
        let sealed = self.sealed_path();
        self.with_segment(key, |s| {
            if s.granted_to.is_none() && s.token.is_none() {
                return Ok(());
            }
            s.token = None;
            s.granted_to = None;
            s.region.set_mode(0o000)?;
            s.region.rename(sealed)?;
            Ok(())
        })
    }

    pub fn set_owner(&self, key: &CdiKey, owner: ContainerId) -> Result<(), MinionError> {
        self.with_segment(key, |s| {
            s.owner = Some(owner);
            Ok(())
        })
    }

    pub fn read(
        &self,
        key: &CdiKey,
        token: AccessToken,
        offset: u64,
        len: u64,
    ) -> Result<Vec<u8>, MinionError> {
        self.with_segment(key, |s| {
            s.check_token(token)?;
            s.check_range(offset, len)?;
            let mut out = vec![0u8; len as usize];
            s.region.read_at(offset as usize, &mut out);
            s.counters.payload_bytes_out += len;
            self.state.totals_out.fetch_add(len, Ordering::SeqCst);
            Ok(out)
        })
    }

    pub fn write(
        &self,
        key: &CdiKey,
        token: AccessToken,
        offset: u64,
        payload: &[u8],
    ) -> Result<(), MinionError> {
        self.with_segment(key, |s| {
            s.check_token(token)?;
            s.check_range(offset, payload.len() as u64)?;
            s.region.write_at(offset as usize, payload);
            s.counters.payload_bytes_in += payload.len() as u64;
            self.state
                .totals_in
                .fetch_add(payload.len() as u64, Ordering::SeqCst);
            Ok(())
        })
    }

    pub fn deallocate(&self, key: &CdiKey) -> Result<(), MinionError> {
        let seg = self
            .state
            .segments
            .lock()
            .unwrap()
            .remove(key)
            .ok_or_else(|| MinionError::UnknownKey(key.clone()))?;
        let mut s = seg.lock().unwrap();
        s.released = true;
        s.token = None;
        s.granted_to = None;
        self.credit(s.capacity());
        // The region itself is unlinked when the last reference drops.
        Ok(())
    }

    pub fn counters(&self, key: Option<&CdiKey>) -> Result<Counters, MinionError> {
        match key {
            None => Ok(self.totals()),
            Some(k) => self.with_segment(k, |s| Ok(s.counters)),
        }
    }

    /// Stream a revoked segment to the minion at `dest`.
    pub fn copy_push(&self, key: &CdiKey, dest: &str) -> Result<(), MinionError> {
        let corrupt = self.state.faults.take_corruption();
        let pool = self.state.peers.get(dest);
        self.with_segment(key, |s| {
            if s.granted_to.is_some() {
                return Err(MinionError::StillGranted(key.clone()));
            }
            let owner = s.owner.unwrap_or(ContainerId(0));
            // SAFETY: the segment is revoked, so no client holds its name and
            // the segment lock keeps other minion operations out.
            let data = unsafe { s.region.as_slice() };
            let corrupt_bit = corrupt.then(|| (rand::random::<u64>() % data.len() as u64) * 8);
            let failed = |reason: String| MinionError::CopyFailed {
                key: key.clone(),
                reason,
            };
            let reply = pool
                .with(|conn: &mut Connection| -> Result<Reply, BulkOrNet> {
                    let id = conn.next_request_id();
                    wire::send_bulk(conn.writer(), id, key, owner, data, corrupt_bit)?;
                    let env = conn.recv()?;
                    match env.message {
                        Message::Reply(r) if env.request_id == id => Ok(r),
                        other => Err(BulkOrNet::Net(NetError::UnexpectedMessage(Box::new(other)))),
                    }
                })
                .map_err(|e| failed(e.to_string()))?;
            if !reply.is_ok() {
                return Err(failed(reply.detail.unwrap_or_else(|| "rejected".into())));
            }
            s.counters.payload_bytes_out += data.len() as u64;
            self.state
                .totals_out
                .fetch_add(data.len() as u64, Ordering::SeqCst);
            Ok(())
        })
    }

    /// Receive a bulk copy announced by a `BulkCopy` header. A stale ungranted
    /// copy under the same key (left by an aborted transfer) is replaced.
    fn receive_bulk<R: Read>(
        &self,
        r: &mut R,
        key: &CdiKey,
        total: u64,
        owner: ContainerId,
    ) -> Result<(), MinionError> {
        let stale = self
            .segment(key)
            .ok()
            .map(|s| s.lock().unwrap().granted_to.is_none());
        match stale {
            Some(true) => {
                let _ = self.deallocate(key);
            }
            Some(false) => {
                drain(r, total + 4)?;
                return Err(MinionError::DuplicateKey(key.clone()));
            }
            None => {}
        }
        if let Err(e) = self.allocate(key, total, None) {
            drain(r, total + 4)?;
            return Err(e);
        }
        let result = self.with_segment(key, |s| {
            // SAFETY: freshly allocated and never granted.
            let dest = unsafe { s.region.as_mut_slice() };
            wire::recv_bulk(r, total, dest).map_err(|e| MinionError::CopyFailed {
                key: key.clone(),
                reason: e.to_string(),
            })?;
            s.owner = Some(owner);
            s.counters.payload_bytes_in += total;
            Ok(())
        });
        match result {
            Ok(()) => {
                self.state.totals_in.fetch_add(total, Ordering::SeqCst);
                Ok(())
            }
            Err(e) => {
                let _ = self.deallocate(key);
                Err(e)
            }
        }
    }

    fn dispatch(&self, message: Message) -> Reply {
        let t = message.msg_type();
        if let Err(e) = self.state.faults.before(t) {
            return Reply::error(e.kind(), e.to_string());
        }
        let result: Result<Reply, MinionError> = match message {
            Message::MinionAllocate {
                key,
                size,
                clone_from,
            } => self.allocate(&key, size, clone_from.as_ref()).map(|_| Reply::ok()),
            Message::MinionGrant { key, container } => {
                self.grant(&key, container).map(|g| Reply::ok().with_grant(g))
            }
            Message::MinionRevoke { key } => self.revoke(&key).map(|_| Reply::ok()),
            Message::MinionSetOwner { key, owner } => {
                self.set_owner(&key, owner).map(|_| Reply::ok())
            }
            Message::MinionCopyPush { key, dest_endpoint } => {
                self.copy_push(&key, &dest_endpoint).map(|_| Reply::ok())
            }
            Message::MinionDeallocate { key } => self.deallocate(&key).map(|_| Reply::ok()),
            Message::Read {
                key,
                token,
                offset,
                length,
            } => self.read(&key, token, offset, length).map(|data| Reply {
                data: Some(data),
                ..Reply::ok()
            }),
            Message::Write {
                key,
                token,
                offset,
                payload,
            } => self.write(&key, token, offset, &payload).map(|_| Reply::ok()),
            Message::MinionStats { key } => self.counters(key.as_ref()).map(|c| Reply {
                counters: Some(c),
                ..Reply::ok()
            }),
            other => {
                return Reply::error(
                    ErrorKind::BadRequest,
                    format!("minion does not handle {:?}", other.msg_type()),
                )
            }
        };
        result.unwrap_or_else(|e| Reply::error(e.kind(), e.to_string()))
    }

    fn serve_connection(&self, stream: TcpStream) {
        let mut conn = match Connection::from_stream(stream) {
            Ok(c) => c,
            Err(e) => {
                log::warn!("minion {}: {e}", self.host_id());
                return;
            }
        };
        loop {
            let env = match conn.recv() {
                Ok(env) => env,
                Err(NetError::Wire(WireError::Closed)) => return,
                Err(e) => {
                    log::debug!("minion {}: closing connection: {e}", self.host_id());
                    return;
                }
            };
            let reply = match env.message {
                Message::BulkCopy {
                    key,
                    total_bytes,
                    owner,
                } => {
                    let _ = self.state.faults.before(MsgType::BulkCopy);
                    match self.receive_bulk(conn.reader(), &key, total_bytes, owner) {
                        Ok(()) => Reply::ok(),
                        Err(MinionError::Io(e)) => {
                            log::debug!("minion {}: bulk stream broke: {e}", self.host_id());
                            return;
                        }
                        Err(e) => Reply::error(e.kind(), e.to_string()),
                    }
                }
                other => self.dispatch(other),
            };
            if conn
                .send(&Envelope::new(env.request_id, Message::Reply(reply)))
                .is_err()
            {
                return;
            }
        }
    }

    /// Serve the wire protocol on `listener` until the returned handle is dropped.
    pub fn serve(&self, listener: TcpListener) -> io::Result<MinionServer> {
        let local = listener.local_addr()?;
        {
            let mut ep = self.state.endpoint.lock().unwrap();
            if ep.is_empty() {
                *ep = local.to_string();
            }
        }
        let me = self.clone();
        let server = Server::spawn(listener, &format!("minion-{}", self.host_id()), move |s| {
            me.serve_connection(s)
        })?;
        Ok(MinionServer {
            minion: self.clone(),
            server,
        })
    }

    /// Announce this minion to a controller.
    pub fn announce(&self, controller: &str) -> Result<(), NetError> {
        let mut conn = Connection::open(controller, Some(self.state.config.io_timeout))?;
        conn.call_reply(Message::MinionHello {
            host_id: self.host_id().to_string(),
            endpoint: self.endpoint(),
        })?;
        Ok(())
    }
}

#[derive(Debug, Error)]
enum BulkOrNet {
    #[error(transparent)]
    Bulk(#[from] BulkError),
    #[error(transparent)]
    Net(#[from] NetError),
}

fn drain<R: Read>(r: &mut R, n: u64) -> io::Result<()> {
    let copied = io::copy(&mut r.take(n), &mut io::sink())?;
    if copied != n {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(())
}

pub struct MinionServer {
    minion: Minion,
    server: Server,
}

impl MinionServer {
    pub fn minion(&self) -> &Minion {
        &self.minion
    }

    pub fn endpoint(&self) -> String {
        self.minion.endpoint()
    }

    pub fn shutdown(&mut self) {
        self.server.shutdown();
    }
}
