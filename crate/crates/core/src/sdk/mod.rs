//! Application-facing CDI API.
//!
//! A [`Session`] is one registered container. It multiplexes requests over a
//! single controller connection, so it can be cloned and shared by threads
//! working on independent handles. A [`CdiHandle`] names one object and caches
//! the grant while this container owns it. Reads and writes go straight to the
//! shared segment when the object lives on this container's host and through
//! the owning minion otherwise; the calling code is identical either way.

mod config;

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::Duration;

use memmap2::MmapRaw;
use thiserror::Error;

pub use config::{AppConfig, ConfigError, CONFIG_ENV};

use crate::minion::ShmRegion;
use crate::model::{CdiKey, ContainerId, ReturnCode};
use crate::net::{self, NetError, Pools};
use crate::wire::{
    self, Counters, DirectoryEntry, Envelope, ErrorKind, Grant, Message, Reply, WireError,
    DEFAULT_MAX_FRAME,
};

/// Largest payload moved in one remote read or write message.
const REMOTE_CHUNK: usize = 4 << 20;
const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Error)]
pub enum SdkError {
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("connection to controller lost")]
    Disconnected,
    #[error("container {container} does not own {key}")]
    NotOwner { container: ContainerId, key: CdiKey },
    #[error("range {offset}+{len} exceeds capacity {capacity}")]
    OutOfBounds { offset: u64, len: u64, capacity: u64 },
    #[error("{kind:?}: {detail}")]
    Remote { kind: ErrorKind, detail: String },
    #[error("unexpected reply {0:?}")]
    Unexpected(Box<Message>),
    #[error("cannot map segment: {0}")]
    Map(std::io::Error),
}

impl SdkError {
    pub fn kind(&self) -> Option<ErrorKind> {
        match self {
            SdkError::Remote { kind, .. } => Some(*kind),
            SdkError::NotOwner { .. } => Some(ErrorKind::NotOwner),
            SdkError::OutOfBounds { .. } => Some(ErrorKind::OutOfBounds),
            _ => None,
        }
    }

    fn from_reply(r: Reply) -> Self {
        SdkError::Remote {
            kind: r.error.unwrap_or(ErrorKind::Internal),
            detail: r.detail.unwrap_or_default(),
        }
    }
}

impl From<WireError> for SdkError {
    fn from(e: WireError) -> Self {
        SdkError::Net(NetError::Wire(e))
    }
}

type Pending = Arc<Mutex<Option<HashMap<u64, mpsc::Sender<Message>>>>>;

struct Inner {
    config: AppConfig,
    writer: Mutex<TcpStream>,
    pending: Pending,
    next_id: AtomicU64,
    minions: Pools,
}

impl Drop for Inner {
    fn drop(&mut self) {
        let _ = self.writer.lock().unwrap().shutdown(Shutdown::Both);
    }
}

/// A registered container's connection to the runtime.
#[derive(Clone)]
pub struct Session {
    inner: Arc<Inner>,
}

impl Session {
    /// Connect to the controller and register `config.self_id`.
    pub fn register(config: AppConfig) -> Result<Session, SdkError> {
        let stream = net::connect(&config.controller, Some(CONNECT_TIMEOUT))?;
        stream.set_read_timeout(None).map_err(NetError::from)?;
        let local = stream.local_addr().map_err(NetError::from)?;
        let pending: Pending = Arc::new(Mutex::new(Some(HashMap::new())));
        let reader = BufReader::with_capacity(64 * 1024, stream.try_clone().map_err(NetError::from)?);
        {
            let pending = pending.clone();
            thread::Builder::new()
                .name(format!("cdi-session-{}", config.self_id))
                .spawn(move || read_loop(reader, pending))
                .map_err(NetError::from)?;
        }
        let session = Session {
            inner: Arc::new(Inner {
                writer: Mutex::new(stream),
                pending,
                next_id: AtomicU64::new(1),
                minions: Pools::new(Some(CONNECT_TIMEOUT)),
                config,
            }),
        };
        let reply = session.call_reply(Message::Register {
            container: session.id(),
            container_endpoint: local.to_string(),
            host_endpoint: session.inner.config.minion.clone(),
        })?;
        if !reply.is_ok() {
            return Err(SdkError::from_reply(reply));
        }
        Ok(session)
    }

    pub fn id(&self) -> ContainerId {
        self.inner.config.self_id
    }

    pub fn config(&self) -> &AppConfig {
        &self.inner.config
    }

    /// Send a request and wait for the message answering it.
    pub fn call(&self, message: Message) -> Result<Message, SdkError> {
        let id = self.inner.next_id.fetch_add(1, Ordering::Relaxed);
        let (tx, rx) = mpsc::channel();
        match self.inner.pending.lock().unwrap().as_mut() {
            Some(p) => p.insert(id, tx),
            None => return Err(SdkError::Disconnected),
        };
        let frame = wire::encode(&Envelope::new(id, message))?;
        if let Err(e) = self.inner.writer.lock().unwrap().write_all(&frame) {
            if let Some(p) = self.inner.pending.lock().unwrap().as_mut() {
                p.remove(&id);
            }
            return Err(NetError::from(e).into());
        }
        rx.recv().map_err(|_| SdkError::Disconnected)
    }

    pub fn call_reply(&self, message: Message) -> Result<Reply, SdkError> {
        match self.call(message)? {
            Message::Reply(r) => Ok(r),
            other => Err(SdkError::Unexpected(Box::new(other))),
        }
    }

    fn code_of(reply: &Reply) -> Result<ReturnCode, SdkError> {
        ReturnCode::from_value(reply.status).ok_or_else(|| SdkError::from_reply(reply.clone()))
    }

    /// `CDI_create`: 1 with an owned handle, 0 if the key exists, -1 on resource failure.
    pub fn create(&self, key: &CdiKey, size: u64) -> Result<(ReturnCode, Option<CdiHandle>), SdkError> {
        let reply = self.call_reply(Message::Create {
            container: self.id(),
            key: key.clone(),
            size,
        })?;
        let code = Self::code_of(&reply)?;
        if let (ReturnCode::Failure, Some(kind)) = (code, reply.error) {
            log::debug!("create {key} failed: {kind:?} {}", reply.detail.as_deref().unwrap_or(""));
        }
        let handle = match (code, reply.grant) {
            (ReturnCode::Success, Some(g)) => Some(CdiHandle::owned(self.clone(), key.clone(), g)),
            _ => None,
        };
        Ok((code, handle))
    }

    /// `CDI_use`: 1 with an unowned handle if the key exists, 0 otherwise.
    pub fn use_key(&self, key: &CdiKey) -> Result<(ReturnCode, Option<CdiHandle>), SdkError> {
        let reply = self.call_reply(Message::Use {
            container: self.id(),
            key: key.clone(),
        })?;
        let code = Self::code_of(&reply)?;
        if reply.error.is_some() {
            return Err(SdkError::from_reply(reply));
        }
        let handle = (code == ReturnCode::Success).then(|| CdiHandle::unowned(self.clone(), key.clone()));
        Ok((code, handle))
    }

    /// Directory snapshot from the controller.
    pub fn audit(&self) -> Result<Vec<DirectoryEntry>, SdkError> {
        let reply = self.call_reply(Message::Audit)?;
        if !reply.is_ok() {
            return Err(SdkError::from_reply(reply));
        }
        Ok(reply.entries)
    }

    /// Payload counters of a minion, or of one of its segments.
    pub fn minion_stats(&self, minion: &str, key: Option<&CdiKey>) -> Result<Counters, SdkError> {
        let reply = self.minion_call(
            minion,
            Message::MinionStats {
                key: key.cloned(),
            },
        )?;
        reply
            .counters
            .ok_or_else(|| SdkError::Unexpected(Box::new(Message::Reply(reply))))
    }

    fn minion_call(&self, minion: &str, message: Message) -> Result<Reply, SdkError> {
        let reply = self.inner.minions.get(minion).call_reply(message)?;
        if reply.is_ok() {
            Ok(reply)
        } else {
            Err(SdkError::from_reply(reply))
        }
    }
}

fn read_loop(mut reader: BufReader<TcpStream>, pending: Pending) {
    loop {
        match wire::read_envelope(&mut reader, DEFAULT_MAX_FRAME) {
            Ok(env) => {
                let tx = pending
                    .lock()
                    .unwrap()
                    .as_mut()
                    .and_then(|p| p.remove(&env.request_id));
                match tx {
                    Some(tx) => {
                        let _ = tx.send(env.message);
                    }
                    None => log::warn!("reply for unknown request {}", env.request_id),
                }
            }
            Err(e) => {
                if !matches!(e, WireError::Closed) {
                    log::debug!("session reader stopping: {e}");
                }
                // Dropping the senders fails every outstanding call.
                pending.lock().unwrap().take();
                return;
            }
        }
    }
}

/// Bytes of a granted segment reachable in this process.
struct LocalMap {
    token: u128,
    map: MmapRaw,
}

/// A container's reference to one CDI object.
///
/// Not for concurrent use from several threads; give each thread its own handle.
pub struct CdiHandle {
    session: Session,
    key: CdiKey,
    grant: Option<Grant>,
    local: Option<LocalMap>,
}

impl std::fmt::Debug for CdiHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CdiHandle")
            .field("key", &self.key)
            .field("container", &self.session.id())
            .field("owned", &self.grant.is_some())
            .finish()
    }
}

impl CdiHandle {
    fn owned(session: Session, key: CdiKey, grant: Grant) -> Self {
        CdiHandle {
            session,
            key,
            grant: Some(grant),
            local: None,
        }
    }

    fn unowned(session: Session, key: CdiKey) -> Self {
        CdiHandle {
            session,
            key,
            grant: None,
            local: None,
        }
    }

    pub fn key(&self) -> &CdiKey {
        &self.key
    }

    pub fn session(&self) -> &Session {
        &self.session
    }

    pub fn is_owner(&self) -> bool {
        self.grant.is_some()
    }

    pub fn grant(&self) -> Option<&Grant> {
        self.grant.as_ref()
    }

    pub fn capacity(&self) -> Option<u64> {
        self.grant.as_ref().map(|g| g.capacity)
    }

    /// Whether the object's segment lives on this container's host.
    pub fn is_local(&self) -> bool {
        self.grant
            .as_ref()
            .is_some_and(|g| g.minion == self.session.config().minion)
    }

    fn set_grant(&mut self, grant: Option<Grant>) {
        self.local = None;
        self.grant = grant;
    }

    fn require_grant(&self) -> Result<&Grant, SdkError> {
        self.grant.as_ref().ok_or_else(|| SdkError::NotOwner {
            container: self.session.id(),
            key: self.key.clone(),
        })
    }

    /// `CDI_access`: block until this container owns the object.
    pub fn access(&mut self) -> Result<(), SdkError> {
        self.access_timeout(None)
    }

    pub fn access_timeout(&mut self, timeout: Option<Duration>) -> Result<(), SdkError> {
        if self.grant.is_some() {
            return Ok(());
        }
        let msg = self.session.call(Message::AccessWait {
            container: self.session.id(),
            key: self.key.clone(),
            timeout_ms: timeout.map(|t| t.as_millis() as u64),
        })?;
        match msg {
            Message::AccessGrantNotify { grant, .. } => {
                self.set_grant(Some(grant));
                Ok(())
            }
            Message::Reply(r) if r.is_ok() && r.grant.is_some() => {
                self.set_grant(r.grant);
                Ok(())
            }
            Message::Reply(r) => Err(SdkError::from_reply(r)),
            other => Err(SdkError::Unexpected(Box::new(other))),
        }
    }

    /// `CDI_transfer`: hand ownership to `target`. The cached grant is dropped
    /// before the request leaves; an aborted transfer restores the grant the
    /// controller hands back.
    pub fn transfer(&mut self, target: ContainerId) -> Result<(), SdkError> {
        self.require_grant()?;
        if target == self.session.id() {
            return Ok(());
        }
        let previous = self.grant.take();
        self.local = None;
        let reply = self.session.call_reply(Message::Transfer {
            container: self.session.id(),
            key: self.key.clone(),
            target,
        })?;
        if reply.is_ok() {
            return Ok(());
        }
        match reply.error {
            Some(ErrorKind::TransferAborted) => self.set_grant(reply.grant.clone()),
            // Rejected before any step ran: the old grant is still live.
            Some(ErrorKind::UnknownTarget | ErrorKind::TransferInFlight) => self.set_grant(previous),
            _ => {}
        }
        Err(SdkError::from_reply(reply))
    }

    /// `CDI_copy`: duplicate the owned object under `new_key`.
    pub fn copy(&self, new_key: &CdiKey) -> Result<(ReturnCode, Option<CdiHandle>), SdkError> {
        self.require_grant()?;
        let reply = self.session.call_reply(Message::Copy {
            container: self.session.id(),
            key: self.key.clone(),
            new_key: new_key.clone(),
        })?;
        let code = match (reply.error, ReturnCode::from_value(reply.status)) {
            (Some(ErrorKind::NotOwner | ErrorKind::UnknownKey), _) | (_, None) => {
                return Err(SdkError::from_reply(reply))
            }
            (_, Some(code)) => code,
        };
        let handle = match (code, reply.grant) {
            (ReturnCode::Success, Some(g)) => {
                Some(CdiHandle::owned(self.session.clone(), new_key.clone(), g))
            }
            _ => None,
        };
        Ok((code, handle))
    }

    /// `CDI_destroy`.
    pub fn destroy(mut self) -> Result<(), SdkError> {
        self.require_grant()?;
        self.local = None;
        let reply = self.session.call_reply(Message::Destroy {
            container: self.session.id(),
            key: self.key.clone(),
        })?;
        if reply.is_ok() {
            Ok(())
        } else {
            Err(SdkError::from_reply(reply))
        }
    }

    fn check_range(&self, offset: u64, len: u64) -> Result<(), SdkError> {
        let capacity = self.require_grant()?.capacity;
        match offset.checked_add(len) {
            Some(end) if end <= capacity => Ok(()),
            _ => Err(SdkError::OutOfBounds {
                offset,
                len,
                capacity,
            }),
        }
    }

    fn local_map(&mut self) -> Result<Option<&MmapRaw>, SdkError> {
        if !self.is_local() {
            return Ok(None);
        }
        let grant = self.grant.as_ref().expect("is_local implies a grant");
        let stale = self.local.as_ref().is_none_or(|m| m.token != grant.token.0);
        if stale {
            let map = ShmRegion::open(Path::new(&grant.segment), grant.capacity as usize)
                .map_err(SdkError::Map)?;
            self.local = Some(LocalMap {
                token: grant.token.0,
                map,
            });
        }
        Ok(self.local.as_ref().map(|m| &m.map))
    }

    pub fn read_into(&mut self, offset: u64, out: &mut [u8]) -> Result<(), SdkError> {
        self.check_range(offset, out.len() as u64)?;
        if let Some(map) = self.local_map()? {
            // SAFETY: in bounds; this container holds the only grant.
            unsafe {
                std::ptr::copy_nonoverlapping(map.as_ptr().add(offset as usize), out.as_mut_ptr(), out.len())
            };
            return Ok(());
        }
        let grant = self.grant.clone().expect("checked by check_range");
        for (i, chunk) in out.chunks_mut(REMOTE_CHUNK).enumerate() {
            let at = offset + (i * REMOTE_CHUNK) as u64;
            let reply = self.session.minion_call(
                &grant.minion,
                Message::Read {
                    key: self.key.clone(),
                    token: grant.token,
                    offset: at,
                    length: chunk.len() as u64,
                },
            )?;
            let data = reply.data.unwrap_or_default();
            if data.len() != chunk.len() {
                return Err(SdkError::Remote {
                    kind: ErrorKind::Internal,
                    detail: format!("short read: {} of {}", data.len(), chunk.len()),
                });
            }
            chunk.copy_from_slice(&data);
        }
        Ok(())
    }

    pub fn read(&mut self, offset: u64, len: u64) -> Result<Vec<u8>, SdkError> {
        self.check_range(offset, len)?;
        let mut out = vec![0u8; len as usize];
        self.read_into(offset, &mut out)?;
        Ok(out)
    }

    pub fn write(&mut self, offset: u64, payload: &[u8]) -> Result<(), SdkError> {
        self.check_range(offset, payload.len() as u64)?;
        if let Some(map) = self.local_map()? {
            // SAFETY: as in `read_into`.
            unsafe {
                std::ptr::copy_nonoverlapping(payload.as_ptr(), map.as_mut_ptr().add(offset as usize), payload.len())
            };
            return Ok(());
        }
        let grant = self.grant.clone().expect("checked by check_range");
        for (i, chunk) in payload.chunks(REMOTE_CHUNK).enumerate() {
            self.session.minion_call(
                &grant.minion,
                Message::Write {
                    key: self.key.clone(),
                    token: grant.token,
                    offset: offset + (i * REMOTE_CHUNK) as u64,
                    payload: chunk.to_vec(),
                },
            )?;
        }
        Ok(())
    }

    /// Run `f` over the object's bytes in place when they are mapped locally,
    /// or over a fetched copy otherwise.
    pub fn with_bytes<T>(&mut self, f: impl FnOnce(&[u8]) -> T) -> Result<T, SdkError> {
        let capacity = self.require_grant()?.capacity;
        if let Some(map) = self.local_map()? {
            // SAFETY: the grant makes this container the only accessor.
            let bytes = unsafe { std::slice::from_raw_parts(map.as_ptr(), capacity as usize) };
            return Ok(f(bytes));
        }
        let data = self.read(0, capacity)?;
        Ok(f(&data))
    }

    /// Mutable counterpart of [`CdiHandle::with_bytes`]; remote objects are
    /// fetched, modified and written back.
    pub fn with_bytes_mut<T>(&mut self, f: impl FnOnce(&mut [u8]) -> T) -> Result<T, SdkError> {
        let capacity = self.require_grant()?.capacity;
        if let Some(map) = self.local_map()? {
            // SAFETY: as in `with_bytes`; `&mut self` keeps this handle exclusive.
            let bytes = unsafe { std::slice::from_raw_parts_mut(map.as_mut_ptr(), capacity as usize) };
            return Ok(f(bytes));
        }
        let mut data = self.read(0, capacity)?;
        let out = f(&mut data);
        self.write(0, &data)?;
        Ok(out)
    }
}
