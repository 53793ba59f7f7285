//! Ownership audit trail.
//!
//! Every ownership-relevant event is one line:
//! `ISO8601 key owner_from owner_to phase`, with `-` for an absent container.
//! Transfers log one line per completed step, so a full cross-host transfer
//! leaves `RevokeSrc CopyPush SetOwnerSrc SetOwnerDst GrantDst` in order.

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, SubsecRound, Utc};

use crate::model::{CdiKey, ContainerId};
use crate::transfer::TransferStep;

pub const CREATE: &str = "Create";
pub const DESTROY: &str = "Destroy";
pub const ABORT: &str = "Abort";

const MAX_EVENTS: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditEvent {
    pub at: DateTime<Utc>,
    pub key: CdiKey,
    pub from: Option<ContainerId>,
    pub to: Option<ContainerId>,
    pub phase: String,
}

fn fmt_id(id: Option<ContainerId>) -> String {
    id.map_or_else(|| "-".to_string(), |c| c.0.to_string())
}

fn parse_id(s: &str) -> Option<Option<ContainerId>> {
    if s == "-" {
        Some(None)
    } else {
        s.parse().ok().map(|v| Some(ContainerId(v)))
    }
}

impl AuditEvent {
    pub fn to_line(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.at.to_rfc3339_opts(SecondsFormat::Micros, true),
            self.key,
            fmt_id(self.from),
            fmt_id(self.to),
            self.phase
        )
    }

    pub fn parse(line: &str) -> Option<AuditEvent> {
        let mut parts = line.split_whitespace();
        let at = DateTime::parse_from_rfc3339(parts.next()?).ok()?.with_timezone(&Utc);
        let key = CdiKey::new(parts.next()?).ok()?;
        let from = parse_id(parts.next()?)?;
        let to = parse_id(parts.next()?)?;
        let phase = parts.next()?.to_string();
        if parts.next().is_some() {
            return None;
        }
        Some(AuditEvent {
            at,
            key,
            from,
            to,
            phase,
        })
    }

    pub fn step(&self) -> Option<TransferStep> {
        TransferStep::from_name(&self.phase)
    }
}

/// Read every well-formed line of an audit log file.
pub fn read_log(path: &Path) -> io::Result<Vec<AuditEvent>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        if let Some(ev) = AuditEvent::parse(&line?) {
            out.push(ev);
        }
    }
    Ok(out)
}

/// The steps one transfer went through, reassembled from the log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransferTrace {
    pub key: CdiKey,
    pub from: ContainerId,
    pub to: ContainerId,
    pub steps: Vec<TransferStep>,
    pub aborted: bool,
}

impl TransferTrace {
    pub fn is_complete(&self) -> bool {
        !self.aborted && self.steps.last() == Some(&TransferStep::GrantDst)
    }
}

/// Group transfer lines into per-transfer traces. Operations on one key are
/// serialized, so a key's lines between `RevokeSrc` and `GrantDst`/`Abort`
/// belong to a single transfer.
pub fn transfer_traces(events: &[AuditEvent]) -> Vec<TransferTrace> {
    let mut open: HashMap<CdiKey, TransferTrace> = HashMap::new();
    let mut done = Vec::new();
    for ev in events {
        let (Some(from), Some(to)) = (ev.from, ev.to) else {
            continue;
        };
        if ev.phase == ABORT {
            let mut t = open.remove(&ev.key).unwrap_or(TransferTrace {
                key: ev.key.clone(),
                from,
                to,
                steps: Vec::new(),
                aborted: true,
            });
            t.aborted = true;
            done.push(t);
            continue;
        }
        let Some(step) = ev.step() else { continue };
        if step == TransferStep::RevokeSrc {
            if let Some(stale) = open.remove(&ev.key) {
                done.push(stale);
            }
        }
        let t = open.entry(ev.key.clone()).or_insert_with(|| TransferTrace {
            key: ev.key.clone(),
            from,
            to,
            steps: Vec::new(),
            aborted: false,
        });
        t.steps.push(step);
        if step == TransferStep::GrantDst {
            done.push(open.remove(&ev.key).unwrap());
        }
    }
    done.extend(open.into_values());
    done
}

pub(crate) struct AuditLog {
    file: Option<Mutex<File>>,
    events: Mutex<VecDeque<AuditEvent>>,
}

impl AuditLog {
    pub fn new(path: Option<&Path>) -> io::Result<Self> {
        let file = path
            .map(|p| OpenOptions::new().create(true).append(true).open(p))
            .transpose()?;
        Ok(AuditLog {
            file: file.map(Mutex::new),
            events: Mutex::new(VecDeque::new()),
        })
    }

    pub fn record(
        &self,
        key: &CdiKey,
        from: Option<ContainerId>,
        to: Option<ContainerId>,
        phase: &str,
    ) {
        let ev = AuditEvent {
            at: Utc::now().trunc_subsecs(6),
            key: key.clone(),
            from,
            to,
            phase: phase.to_string(),
        };
        if let Some(f) = &self.file {
            let mut line = ev.to_line();
            line.push('\n');
            if let Err(e) = f.lock().unwrap().write_all(line.as_bytes()) {
                log::error!("audit log write failed: {e}");
            }
        }
        let mut events = self.events.lock().unwrap();
        if events.len() == MAX_EVENTS {
            events.pop_front();
        }
        events.push_back(ev);
    }

    pub fn events(&self) -> Vec<AuditEvent> {
        self.events.lock().unwrap().iter().cloned().collect()
    }
}
