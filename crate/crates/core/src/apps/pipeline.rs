//! Frame pipeline: an extractor fills `K` objects with frames and hands each
//! to its own detector, the detectors label the frames in place and pass them
//! to a combinator, and the combinator emits digests in frame order before
//! returning the objects to the extractor for the next round.
//!
//! Object layout: a 16-byte header (`index: u64`, `payload_len: u32`,
//! `flags: u32`, big-endian), the frame payload, then a 16-byte label block
//! written by the detector.

use std::thread;
use std::time::Duration;

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};

use crate::cluster::LocalCluster;
use crate::model::{CdiKey, ContainerId, ReturnCode};
use crate::sdk::{CdiHandle, SdkError, Session};
use crate::wire::ErrorKind;

pub const HEADER_LEN: usize = 16;
pub const LABEL_LEN: usize = 16;
pub const FLAG_END: u32 = 1;

pub const EXTRACTOR_ID: u64 = 1;
pub const COMBINATOR_ID: u64 = 2;
pub const DETECTOR_BASE_ID: u64 = 10;

const RETRY: Duration = Duration::from_millis(5);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineParams {
    pub frames: u64,
    pub workers: usize,
    pub frame_size: usize,
    /// Prefix for object keys, so concurrent runs do not collide.
    pub run: String,
}

impl PipelineParams {
    pub fn capacity(&self) -> u64 {
        (HEADER_LEN + self.frame_size + LABEL_LEN) as u64
    }

    pub fn slot_key(&self, slot: usize) -> CdiKey {
        CdiKey::new(format!("{}-slot{}", self.run, slot)).expect("run prefix is short")
    }

    pub fn detector_id(&self, slot: usize) -> ContainerId {
        ContainerId(DETECTOR_BASE_ID + slot as u64)
    }
}

/// Deterministic synthetic frame `index`.
pub fn synth_frame(index: u64, size: usize) -> Vec<u8> {
    let mut out = vec![0u8; size];
    StdRng::seed_from_u64(index ^ 0x5eed_f4a3e).fill_bytes(&mut out);
    out
}

/// The detector transform: a byte map over the payload plus a label block
/// derived from the result. Depends only on the payload.
pub fn transform(payload: &mut [u8]) -> [u8; LABEL_LEN] {
    for (i, b) in payload.iter_mut().enumerate() {
        *b = b.rotate_left(3) ^ 0x5a ^ (i as u8);
    }
    let bright = payload.iter().filter(|&&b| b >= 0x80).count() as u32;
    let mut label = [0u8; LABEL_LEN];
    label[..4].copy_from_slice(&crc32fast::hash(payload).to_be_bytes());
    label[4..8].copy_from_slice(&bright.to_be_bytes());
    label[8..].copy_from_slice(b"LABELLED");
    label
}

pub fn frame_digest(payload: &[u8], label: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(payload);
    h.update(label);
    h.finalize()
}

/// Expected combinator output computed in a single process.
pub fn oracle(frames: u64, frame_size: usize) -> Vec<(u64, u32)> {
    (0..frames)
        .map(|i| {
            let mut f = synth_frame(i, frame_size);
            let label = transform(&mut f);
            (i, frame_digest(&f, &label))
        })
        .collect()
}

pub fn format_output(lines: &[(u64, u32)]) -> String {
    lines.iter().map(|(i, d)| format!("{i} {d:08x}\n")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Header {
    index: u64,
    len: u32,
    flags: u32,
}

impl Header {
    fn read(b: &[u8]) -> Header {
        Header {
            index: u64::from_be_bytes(b[0..8].try_into().unwrap()),
            len: u32::from_be_bytes(b[8..12].try_into().unwrap()),
            flags: u32::from_be_bytes(b[12..16].try_into().unwrap()),
        }
    }

    fn write(&self, b: &mut [u8]) {
        b[0..8].copy_from_slice(&self.index.to_be_bytes());
        b[8..12].copy_from_slice(&self.len.to_be_bytes());
        b[12..16].copy_from_slice(&self.flags.to_be_bytes());
    }

    fn is_end(&self) -> bool {
        self.flags & FLAG_END != 0
    }
}

fn pipeline_error(what: &str, code: ReturnCode) -> SdkError {
    SdkError::Remote {
        kind: ErrorKind::Internal,
        detail: format!("{what} returned {code}"),
    }
}

/// Join the group of an object someone else creates, waiting for it to appear.
fn use_when_created(session: &Session, key: &CdiKey) -> Result<CdiHandle, SdkError> {
    loop {
        if let (ReturnCode::Success, Some(h)) = session.use_key(key)? {
            return Ok(h);
        }
        thread::sleep(RETRY);
    }
}

/// Transfer, retrying while the target has not registered yet.
fn transfer_when_ready(h: &mut CdiHandle, target: ContainerId) -> Result<(), SdkError> {
    loop {
        match h.transfer(target) {
            Err(e) if e.kind() == Some(ErrorKind::UnknownTarget) => thread::sleep(RETRY),
            other => return other,
        }
    }
}

pub fn run_extractor(session: &Session, p: &PipelineParams) -> Result<(), SdkError> {
    let mut slots = Vec::with_capacity(p.workers);
    for i in 0..p.workers {
        match session.create(&p.slot_key(i), p.capacity())? {
            (ReturnCode::Success, Some(h)) => slots.push(h),
            (code, _) => return Err(pipeline_error("create", code)),
        }
    }
    // Slot i carries frames i, i+K, ... and then one end marker, whose index
    // is the first of its residue class at or past the frame count.
    let k = p.workers as u64;
    let last = p.frames + k;
    for round in 0..last.div_ceil(k) {
        for (i, h) in slots.iter_mut().enumerate() {
            let index = round * k + i as u64;
            if index >= last {
                continue;
            }
            h.access()?;
            let end = index >= p.frames;
            h.with_bytes_mut(|b| {
                let header = Header {
                    index,
                    len: if end { 0 } else { p.frame_size as u32 },
                    flags: if end { FLAG_END } else { 0 },
                };
                header.write(&mut b[..HEADER_LEN]);
                if !end {
                    b[HEADER_LEN..HEADER_LEN + p.frame_size]
                        .copy_from_slice(&synth_frame(index, p.frame_size));
                }
            })?;
            transfer_when_ready(h, p.detector_id(i))?;
        }
    }
    for mut h in slots {
        h.access()?;
        h.destroy()?;
    }
    Ok(())
}

pub fn run_detector(session: &Session, p: &PipelineParams, slot: usize) -> Result<u64, SdkError> {
    let mut h = use_when_created(session, &p.slot_key(slot))?;
    let mut processed = 0;
    loop {
        h.access()?;
        let end = h.with_bytes_mut(|b| {
            let header = Header::read(&b[..HEADER_LEN]);
            if header.is_end() {
                return true;
            }
            let len = header.len as usize;
            let (payload, rest) = b[HEADER_LEN..].split_at_mut(len);
            let label = transform(payload);
            rest[..LABEL_LEN].copy_from_slice(&label);
            false
        })?;
        transfer_when_ready(&mut h, ContainerId(COMBINATOR_ID))?;
        if end {
            return Ok(processed);
        }
        processed += 1;
    }
}

/// Collect frames in order; `emit` sees each `(index, digest)` as it completes.
pub fn run_combinator(
    session: &Session,
    p: &PipelineParams,
    mut emit: impl FnMut(u64, u32),
) -> Result<(), SdkError> {
    let mut slots = (0..p.workers)
        .map(|i| use_when_created(session, &p.slot_key(i)))
        .collect::<Result<Vec<_>, _>>()?;
    for j in 0..p.frames + p.workers as u64 {
        let h = &mut slots[(j % p.workers as u64) as usize];
        h.access()?;
        let out = h.with_bytes(|b| {
            let header = Header::read(&b[..HEADER_LEN]);
            if header.is_end() {
                return None;
            }
            let len = header.len as usize;
            let payload = &b[HEADER_LEN..HEADER_LEN + len];
            let label = &b[HEADER_LEN + len..HEADER_LEN + len + LABEL_LEN];
            Some((header.index, frame_digest(payload, label)))
        })?;
        if let Some((index, digest)) = out {
            emit(index, digest);
        }
        h.transfer(ContainerId(EXTRACTOR_ID))?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// Every container on one host.
    Single,
    /// Extractor and combinator on one host, detectors on another.
    Multi,
}

impl Topology {
    pub fn hosts(self) -> usize {
        match self {
            Topology::Single => 1,
            Topology::Multi => 2,
        }
    }

    /// Host index of a container in this topology.
    pub fn host_of(self, container: ContainerId) -> usize {
        match self {
            Topology::Multi if container.0 >= DETECTOR_BASE_ID => 1,
            _ => 0,
        }
    }
}

/// Run every role as a thread with its own session against `cluster`.
pub fn run_local(
    cluster: &LocalCluster,
    p: &PipelineParams,
    topology: Topology,
) -> Result<Vec<(u64, u32)>, SdkError> {
    let session = |id: u64| cluster.session(id, topology.host_of(ContainerId(id)));
    let extractor = session(EXTRACTOR_ID)?;
    let combinator = session(COMBINATOR_ID)?;
    let detectors = (0..p.workers)
        .map(|i| session(p.detector_id(i).0))
        .collect::<Result<Vec<_>, _>>()?;
    thread::scope(|s| {
        let detector_threads: Vec<_> = detectors
            .iter()
            .enumerate()
            .map(|(i, d)| s.spawn(move || run_detector(d, p, i)))
            .collect();
        let comb = s.spawn(|| {
            let mut out = Vec::new();
            run_combinator(&combinator, p, |i, d| out.push((i, d))).map(|_| out)
        });
        run_extractor(&extractor, p)?;
        for t in detector_threads {
            t.join().expect("detector panicked")?;
        }
        comb.join().expect("combinator panicked")
    })
}
