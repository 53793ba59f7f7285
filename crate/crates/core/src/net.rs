//! Blocking TCP plumbing: request/reply connections, per-endpoint pools and a
//! thread-per-connection accept loop.

use std::collections::HashMap;
use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use thiserror::Error;

use crate::wire::{self, Envelope, Message, Reply, WireError, DEFAULT_MAX_FRAME};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("cannot connect to {endpoint}: {source}")]
    Connect {
        endpoint: String,
        #[source]
        source: io::Error,
    },
    #[error("reply id {got} does not match request id {expected}")]
    IdMismatch { expected: u64, got: u64 },
    #[error("expected a reply, got {0:?}")]
    UnexpectedMessage(Box<Message>),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl NetError {
    pub fn is_timeout(&self) -> bool {
        match self {
            NetError::Wire(WireError::Io(e)) => matches!(
                e.kind(),
                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
            ),
            _ => false,
        }
    }
}

impl From<io::Error> for NetError {
    fn from(e: io::Error) -> Self {
        NetError::Wire(WireError::Io(e))
    }
}

pub fn connect(endpoint: &str, timeout: Option<Duration>) -> Result<TcpStream, NetError> {
    let err = |source| NetError::Connect {
        endpoint: endpoint.to_string(),
        source,
    };
    let addr = endpoint
        .to_socket_addrs()
        .map_err(err)?
        .next()
        .ok_or_else(|| err(io::Error::new(io::ErrorKind::InvalidInput, "no address")))?;
    let stream = match timeout {
        Some(t) => TcpStream::connect_timeout(&addr, t),
        None => TcpStream::connect(addr),
    }
    .map_err(err)?;
    stream.set_nodelay(true).map_err(err)?;
    stream.set_read_timeout(timeout).map_err(err)?;
    Ok(stream)
}

/// One client-side connection carrying sequential request/reply exchanges.
pub struct Connection {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    next_id: u64,
}

impl Connection {
    pub fn open(endpoint: &str, timeout: Option<Duration>) -> Result<Self, NetError> {
        Self::from_stream(connect(endpoint, timeout)?)
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self, NetError> {
        let reader = BufReader::with_capacity(64 * 1024, stream.try_clone()?);
        Ok(Connection {
            writer: stream,
            reader,
            next_id: 1,
        })
    }

    pub fn next_request_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn send(&mut self, env: &Envelope) -> Result<(), NetError> {
        let frame = wire::encode(env)?;
        self.writer.write_all(&frame)?;
        Ok(())
    }

    pub fn recv(&mut self) -> Result<Envelope, NetError> {
        Ok(wire::read_envelope(&mut self.reader, DEFAULT_MAX_FRAME)?)
    }

    /// Send `message` and wait for the reply echoing its id.
    pub fn call(&mut self, message: Message) -> Result<Envelope, NetError> {
        let id = self.next_request_id();
        self.send(&Envelope::new(id, message))?;
        let reply = self.recv()?;
        if reply.request_id != id {
            return Err(NetError::IdMismatch {
                expected: id,
                got: reply.request_id,
            });
        }
        Ok(reply)
    }

    /// [`Connection::call`] for exchanges answered with a plain `Reply`.
    pub fn call_reply(&mut self, message: Message) -> Result<Reply, NetError> {
        match self.call(message)?.message {
            Message::Reply(r) => Ok(r),
            other => Err(NetError::UnexpectedMessage(Box::new(other))),
        }
    }

    pub fn writer(&mut self) -> &mut TcpStream {
        &mut self.writer
    }

    pub fn reader(&mut self) -> &mut BufReader<TcpStream> {
        &mut self.reader
    }

    pub fn set_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.writer.set_read_timeout(timeout)
    }
}

/// Reusable connections to one endpoint; concurrent callers each get their own.
pub struct ConnectionPool {
    endpoint: String,
    timeout: Option<Duration>,
    idle: Mutex<Vec<Connection>>,
}

impl ConnectionPool {
    pub fn new(endpoint: impl Into<String>, timeout: Option<Duration>) -> Self {
        ConnectionPool {
            endpoint: endpoint.into(),
            timeout,
            idle: Mutex::new(Vec::new()),
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    /// Run `f` on a pooled connection. The connection is returned to the pool
    /// only if `f` succeeds; a failed exchange may have left it mid-frame.
    pub fn with<T, E: From<NetError>>(
        &self,
        f: impl FnOnce(&mut Connection) -> Result<T, E>,
    ) -> Result<T, E> {
        let pooled = self.idle.lock().unwrap().pop();
        let mut conn = match pooled {
            Some(c) => c,
            None => Connection::open(&self.endpoint, self.timeout)?,
        };
        let out = f(&mut conn)?;
        self.idle.lock().unwrap().push(conn);
        Ok(out)
    }

    pub fn call_reply(&self, message: Message) -> Result<Reply, NetError> {
        self.with(|c| c.call_reply(message))
    }
}

/// Endpoint-keyed pools, created on first use.
#[derive(Default)]
pub struct Pools {
    timeout: Option<Duration>,
    pools: Mutex<HashMap<String, Arc<ConnectionPool>>>,
}

impl Pools {
    pub fn new(timeout: Option<Duration>) -> Self {
        Pools {
            timeout,
            pools: Mutex::new(HashMap::new()),
        }
    }

    pub fn get(&self, endpoint: &str) -> Arc<ConnectionPool> {
        self.pools
            .lock()
            .unwrap()
            .entry(endpoint.to_string())
            .or_insert_with(|| Arc::new(ConnectionPool::new(endpoint, self.timeout)))
            .clone()
    }
}

/// A listening service running one thread per accepted connection.
pub struct Server {
    addr: SocketAddr,
    stopping: Arc<AtomicBool>,
    live: Arc<Mutex<HashMap<u64, TcpStream>>>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn spawn<H>(listener: TcpListener, name: &str, handler: H) -> io::Result<Server>
    where
        H: Fn(TcpStream) + Send + Sync + 'static,
    {
        let addr = listener.local_addr()?;
        let stopping = Arc::new(AtomicBool::new(false));
        let live: Arc<Mutex<HashMap<u64, TcpStream>>> = Arc::default();
        let handler = Arc::new(handler);
        let next = AtomicU64::new(0);
        let accept = {
            let stopping = stopping.clone();
            let live = live.clone();
            let name = name.to_string();
            thread::Builder::new()
                .name(format!("{name}-accept"))
                .spawn(move || {
                    for stream in listener.incoming() {
                        if stopping.load(Ordering::SeqCst) {
                            break;
                        }
                        let stream = match stream {
                            Ok(s) => s,
                            Err(e) => {
                                log::warn!("{name}: accept failed: {e}");
                                continue;
                            }
                        };
                        let _ = stream.set_nodelay(true);
                        let id = next.fetch_add(1, Ordering::Relaxed);
                        if let Ok(clone) = stream.try_clone() {
                            live.lock().unwrap().insert(id, clone);
                        }
                        let handler = handler.clone();
                        let live = live.clone();
                        let spawned = thread::Builder::new()
                            .name(format!("{name}-conn-{id}"))
                            .spawn(move || {
                                handler(stream);
                                live.lock().unwrap().remove(&id);
                            });
                        if let Err(e) = spawned {
                            log::error!("{name}: cannot spawn connection thread: {e}");
                        }
                    }
                })?
        };
        Ok(Server {
            addr,
            stopping,
            live,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stop accepting and close every open connection.
    pub fn shutdown(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // Wake the accept loop.
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        for (_, s) in self.live.lock().unwrap().drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Bind helper accepting `HOST:PORT`; port 0 picks a free port.
pub fn bind(addr: &str) -> io::Result<TcpListener> {
    TcpListener::bind(addr)
}
