//! Hand-off latency measurement.
//!
//! One round moves a payload from a driver to a peer and waits for the peer's
//! acknowledgement:
//!
//! * `shm`: ownership transfer between two containers on one host, peer
//!   accesses the object and touches its first and last bytes in place.
//! * `stream`: the same hand-off with the peer on another host, so the
//!   payload is pushed between minions.
//! * `baseline-framed`: the payload is framed with the wire codec, sent over
//!   a socket, decoded by the peer and copied into its own buffer.
//!
//! Ownership returns to the driver between rounds outside the timed region.

use std::fmt::Write as _;
use std::net::TcpListener;
use std::str::FromStr;
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use thiserror::Error;

use crate::model::{AccessToken, CdiKey, ContainerId, ReturnCode};
use crate::net::{Connection, NetError};
use crate::sdk::{AppConfig, CdiHandle, SdkError, Session};
use crate::wire::{Envelope, Message, Reply};

pub const KIB: usize = 1024;
pub const MIB: usize = 1024 * 1024;
pub const DEFAULT_SIZES: [usize; 4] = [10 * KIB, 100 * KIB, MIB, 10 * MIB];
pub const DEFAULT_ITERATIONS: usize = 200;
pub const DEFAULT_WARMUP: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Shm,
    Stream,
    Baseline,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Shm, Mode::Stream, Mode::Baseline];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Shm => "shm",
            Mode::Stream => "stream",
            Mode::Baseline => "baseline-framed",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = BenchError;
    fn from_str(s: &str) -> Result<Self, BenchError> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s || (s == "baseline" && *m == Mode::Baseline))
            .ok_or_else(|| BenchError::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Sdk(#[from] SdkError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("peer failed: {0}")]
    Peer(String),
}

/// Parse `10k`, `1m`, `512` and similar into a byte count.
pub fn parse_size(s: &str) -> Result<usize, BenchError> {
    let t = s.trim().to_ascii_lowercase();
    let t = t.strip_suffix("ib").or_else(|| t.strip_suffix('b')).unwrap_or(&t);
    let (digits, mult) = match t.chars().last() {
        Some('k') => (&t[..t.len() - 1], KIB),
        Some('m') => (&t[..t.len() - 1], MIB),
        Some('g') => (&t[..t.len() - 1], 1024 * MIB),
        _ => (t, 1),
    };
    digits
        .parse::<usize>()
        .ok()
        .and_then(|n| n.checked_mul(mult))
        .ok_or_else(|| BenchError::Config(format!("bad size {s:?}")))
}

pub fn format_size(n: usize) -> String {
    if n >= MIB && n.is_multiple_of(MIB) {
        format!("{}MiB", n / MIB)
    } else if n >= KIB && n.is_multiple_of(KIB) {
        format!("{}KiB", n / KIB)
    } else {
        format!("{n}B")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    /// Measured rounds per size.
    pub iterations: usize,
    /// Unmeasured rounds run first.
    pub warmup: usize,
    pub mode: Mode,
}

impl BenchConfig {
    pub fn new(mode: Mode) -> Self {
        BenchConfig {
            sizes: DEFAULT_SIZES.to_vec(),
            iterations: DEFAULT_ITERATIONS,
            warmup: DEFAULT_WARMUP,
            mode,
        }
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.iterations == 0 {
            return Err(BenchError::Config("iterations must be positive".into()));
        }
        if self.iterations <= self.warmup {
            return Err(BenchError::Config(format!(
                "iterations ({}) must exceed warmup ({})",
                self.iterations, self.warmup
            )));
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(BenchError::Config("sizes must be non-empty and positive".into()));
        }
        if self.sizes.windows(2).any(|w| w[0] > w[1]) {
            return Err(BenchError::Config("sizes must be sorted ascending".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub mode: Mode,
    pub size: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub stddev_ms: f64,
}

impl BenchResult {
    /// Summarize per-round latencies given in milliseconds.
    pub fn from_samples(mode: Mode, size: usize, samples: &[f64]) -> BenchResult {
        assert!(!samples.is_empty(), "no samples");
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let var = sorted.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let rank = |q: f64| sorted[((q * n).ceil() as usize).clamp(1, sorted.len()) - 1];
        BenchResult {
            mode,
            size,
            mean_ms: mean,
            p50_ms: rank(0.50),
            p99_ms: rank(0.99),
            stddev_ms: var.sqrt(),
        }
    }
}

pub const CSV_HEADER: &str = "mode,size_bytes,mean_ms,p50_ms,p99_ms,stddev_ms";

pub fn to_csv(results: &[BenchResult]) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in results {
        let _ = writeln!(
            out,
            "{},{},{:.4},{:.4},{:.4},{:.4}",
            r.mode, r.size, r.mean_ms, r.p50_ms, r.p99_ms, r.stddev_ms
        );
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<BenchResult>, BenchError> {
    let bad = |line: &str| BenchError::Config(format!("bad csv row {line:?}"));
    text.lines()
        .skip_while(|l| l.trim() == CSV_HEADER)
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let num = |i: usize| f[i].trim().parse::<f64>().map_err(|_| bad(line));
            Ok(BenchResult {
                mode: f[0].parse()?,
                size: f[1].trim().parse().map_err(|_| bad(line))?,
                mean_ms: num(2)?,
                p50_ms: num(3)?,
                p99_ms: num(4)?,
                stddev_ms: num(5)?,
            })
        })
        .collect()
}

fn mean_of(results: &[BenchResult], mode: Mode, size: usize) -> Option<f64> {
    results
        .iter()
        .find(|r| r.mode == mode && r.size == size)
        .map(|r| r.mean_ms)
}

/// Speedup rows `(size, other mode, other mean / shm mean)` for every size
/// measured in both modes.
pub fn ratios(results: &[BenchResult]) -> Vec<(usize, Mode, f64)> {
    let mut sizes: Vec<usize> = results.iter().filter(|r| r.mode == Mode::Shm).map(|r| r.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut rows = Vec::new();
    for other in [Mode::Stream, Mode::Baseline] {
        for &size in &sizes {
            if let (Some(shm), Some(o)) = (mean_of(results, Mode::Shm, size), mean_of(results, other, size)) {
                rows.push((size, other, o / shm));
            }
        }
    }
    rows
}

pub fn report(results: &[BenchResult]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<16} {:>8} {:>10} {:>10} {:>10} {:>10}",
        "mode", "size", "mean_ms", "p50_ms", "p99_ms", "stddev_ms"
    );
    for r in results {
        let _ = writeln!(
            out,
            "{:<16} {:>8} {:>10.3} {:>10.3} {:>10.3} {:>10.3}",
            r.mode.name(),
            format_size(r.size),
            r.mean_ms,
            r.p50_ms,
            r.p99_ms,
            r.stddev_ms
        );
    }
    let rows = ratios(results);
    if rows.is_empty() {
        out.push_str("\nratios omitted: need shm and at least one other mode at a shared size\n");
        return out;
    }
    out.push('\n');
    for (size, other, ratio) in rows {
        let _ = writeln!(out, "{:>8}  shm/{:<16} {:>7.2}x faster", format_size(size), other.name(), ratio);
    }
    out
}

/// Endpoints used by the CDI modes.
#[derive(Debug, Clone)]
pub struct BenchTopology {
    pub controller: String,
    /// Minion hosting the driver, and the peer in shm mode.
    pub local_minion: String,
    /// Minion hosting the peer in stream mode.
    pub remote_minion: String,
}

const DRIVER_BASE: u64 = 9000;

fn ids(mode: Mode) -> (ContainerId, ContainerId) {
    let base = DRIVER_BASE + 2 * mode as u64;
    (ContainerId(base), ContainerId(base + 1))
}

pub fn run(cfg: &BenchConfig, topo: &BenchTopology) -> Result<Vec<BenchResult>, BenchError> {
    cfg.validate()?;
    cfg.sizes
        .iter()
        .map(|&size| {
            let samples = match cfg.mode {
                Mode::Shm | Mode::Stream => run_cdi(cfg, topo, size)?,
                Mode::Baseline => run_baseline(cfg, size)?,
            };
            Ok(BenchResult::from_samples(cfg.mode, size, &samples))
        })
        .collect()
}

fn stamp(b: &mut [u8], round: u64) {
    let n = b.len();
    b[..8.min(n)].copy_from_slice(&round.to_be_bytes()[..8.min(n)]);
    b[n - 1] = round as u8;
}

fn stamped(b: &[u8], round: u64) -> bool {
    let n = b.len();
    b[..8.min(n)] == round.to_be_bytes()[..8.min(n)] && b[n - 1] == round as u8
}

fn run_cdi(cfg: &BenchConfig, topo: &BenchTopology, size: usize) -> Result<Vec<f64>, BenchError> {
    let (driver_id, peer_id) = ids(cfg.mode);
    let peer_minion = match cfg.mode {
        Mode::Shm => &topo.local_minion,
        _ => &topo.remote_minion,
    };
    let driver = Session::register(AppConfig::new(driver_id, &topo.controller, &topo.local_minion))?;
    let peer = Session::register(AppConfig::new(peer_id, &topo.controller, peer_minion))?;
    let key = CdiKey::new(format!("bench-{}-{size}", cfg.mode)).expect("short key");
    let mut h = match driver.create(&key, size as u64)? {
        (ReturnCode::Success, Some(h)) => h,
        (code, _) => return Err(BenchError::Peer(format!("create returned {code}"))),
    };
    h.write(0, &vec![0xa5; size])?;
    let rounds = (cfg.warmup + cfg.iterations) as u64;
    let (ack_tx, ack_rx) = mpsc::channel::<Result<(), String>>();
    let (go_tx, go_rx) = mpsc::channel::<()>();
    let peer_key = key.clone();
    let peer_thread = thread::spawn(move || -> Result<(), SdkError> {
        let mut p = match peer.use_key(&peer_key)? {
            (_, Some(p)) => p,
            (code, None) => {
                let _ = ack_tx.send(Err(format!("use returned {code}")));
                return Ok(());
            }
        };
        for round in 0..rounds {
            p.access()?;
            let ok = p.with_bytes(|b| stamped(b, round))?;
            let _ = ack_tx.send(if ok { Ok(()) } else { Err(format!("round {round}: stale bytes")) });
            if go_rx.recv().is_err() {
                break;
            }
            p.transfer(driver_id)?;
        }
        Ok(())
    });
    let mut samples = Vec::with_capacity(cfg.iterations);
    let result = (|| {
        for round in 0..rounds {
            h.access()?;
            h.with_bytes_mut(|b| stamp(b, round))?;
            let start = Instant::now();
            h.transfer(peer_id)?;
            ack_rx
                .recv()
                .map_err(|_| BenchError::Peer("peer exited".into()))?
                .map_err(BenchError::Peer)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            if round >= cfg.warmup as u64 {
                samples.push(elapsed);
            }
            let _ = go_tx.send(());
        }
        Ok::<(), BenchError>(())
    })();
    drop(go_tx);
    let joined = peer_thread.join().map_err(|_| BenchError::Peer("peer panicked".into()))?;
    result?;
    joined?;
    cleanup(h)?;
    Ok(samples)
}

fn cleanup(mut h: CdiHandle) -> Result<(), BenchError> {
    h.access()?;
    h.destroy()?;
    Ok(())
}

fn run_baseline(cfg: &BenchConfig, size: usize) -> Result<Vec<f64>, BenchError> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    let rounds = cfg.warmup + cfg.iterations;
    let peer = thread::spawn(move || -> Result<(), BenchError> {
        let (stream, _) = listener.accept()?;
        stream.set_nodelay(true)?;
        let mut conn = Connection::from_stream(stream)?;
        let mut app = vec![0u8; size];
        for _ in 0..rounds {
            let env = conn.recv()?;
            let Message::Write { payload, .. } = env.message else {
                return Err(BenchError::Peer("expected a write frame".into()));
            };
            app.copy_from_slice(&payload);
            conn.send(&Envelope::new(env.request_id, Message::Reply(Reply::ok())))?;
        }
        Ok(())
    });
    let mut conn = Connection::open(&addr, None)?;
    let key = CdiKey::new("baseline").expect("short key");
    let mut app = vec![0xa5u8; size];
    let mut samples = Vec::with_capacity(cfg.iterations);
    for round in 0..rounds {
        stamp(&mut app, round as u64);
        let start = Instant::now();
        let reply = conn.call_reply(Message::Write {
            key: key.clone(),
            token: AccessToken(0),
            offset: 0,
            payload: app.clone(),
        })?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if !reply.is_ok() {
            return Err(BenchError::Peer(format!("peer replied {reply:?}")));
        }
        if round >= cfg.warmup {
            samples.push(elapsed);
        }
    }
    drop(conn);
    peer.join().map_err(|_| BenchError::Peer("peer panicked".into()))??;
    Ok(samples)
}
