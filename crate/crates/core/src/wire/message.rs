use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::tlv::{FieldWriter, Fields};
use super::{WireError, DEFAULT_MAX_FRAME, WIRE_VERSION};
use crate::model::{AccessToken, CdiKey, ContainerId, HostId};
use crate::transfer::{TransferPhase, TransferRecord};

mod tag {
    pub const CONTAINER: u8 = 0x01;
    pub const KEY: u8 = 0x02;
    pub const SIZE: u8 = 0x03;
    pub const CONTAINER_ENDPOINT: u8 = 0x04;
    pub const HOST_ENDPOINT: u8 = 0x05;
    pub const NEW_KEY: u8 = 0x06;
    pub const TARGET: u8 = 0x07;
    pub const TIMEOUT_MS: u8 = 0x08;
    pub const TOKEN: u8 = 0x09;
    pub const OFFSET: u8 = 0x0a;
    pub const LENGTH: u8 = 0x0b;
    pub const PAYLOAD: u8 = 0x0c;
    pub const OWNER: u8 = 0x0d;
    pub const DEST_ENDPOINT: u8 = 0x0e;
    pub const STATUS: u8 = 0x0f;
    pub const ERROR: u8 = 0x10;
    pub const DETAIL: u8 = 0x11;
    pub const GRANT: u8 = 0x12;
    pub const SEGMENT: u8 = 0x13;
    pub const HOST_ID: u8 = 0x14;
    pub const BYTES_IN: u8 = 0x15;
    pub const BYTES_OUT: u8 = 0x16;
    pub const ENTRY: u8 = 0x17;
    pub const CLONE_FROM: u8 = 0x18;
    pub const MEMBER: u8 = 0x19;
    pub const PHASE: u8 = 0x1a;
    pub const FROM: u8 = 0x1b;
    pub const TO: u8 = 0x1c;
    pub const SAME_HOST: u8 = 0x1d;
    pub const TRANSFER: u8 = 0x1e;
    pub const HOLDER: u8 = 0x1f;
    pub const CAPACITY: u8 = 0x20;
    pub const TOTAL_BYTES: u8 = 0x21;
    pub const COUNTERS: u8 = 0x22;
}

/// One-byte message type codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Register = 1,
    Create = 2,
    Use = 3,
    Copy = 4,
    AccessWait = 5,
    AccessGrantNotify = 6,
    Transfer = 7,
    Destroy = 8,
    Read = 9,
    Write = 10,
    MinionAllocate = 11,
    MinionRevoke = 12,
    MinionGrant = 13,
    MinionSetOwner = 14,
    MinionCopyPush = 15,
    MinionDeallocate = 16,
    Reply = 17,
    Audit = 18,
    MinionStats = 19,
    MinionHello = 20,
    BulkCopy = 21,
}

impl MsgType {
    pub fn from_code(code: u8) -> Option<Self> {
        use MsgType::*;
        Some(match code {
            1 => Register,
            2 => Create,
            3 => Use,
            4 => Copy,
            5 => AccessWait,
            6 => AccessGrantNotify,
            7 => Transfer,
            8 => Destroy,
            9 => Read,
            10 => Write,
            11 => MinionAllocate,
            12 => MinionRevoke,
            13 => MinionGrant,
            14 => MinionSetOwner,
            15 => MinionCopyPush,
            16 => MinionDeallocate,
            17 => Reply,
            18 => Audit,
            19 => MinionStats,
            20 => MinionHello,
            21 => BulkCopy,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        use MsgType::*;
        match self {
            Register => "Register",
            Create => "Create",
            Use => "Use",
            Copy => "Copy",
            AccessWait => "AccessWait",
            AccessGrantNotify => "AccessGrantNotify",
            Transfer => "Transfer",
            Destroy => "Destroy",
            Read => "Read",
            Write => "Write",
            MinionAllocate => "MinionAllocate",
            MinionRevoke => "MinionRevoke",
            MinionGrant => "MinionGrant",
            MinionSetOwner => "MinionSetOwner",
            MinionCopyPush => "MinionCopyPush",
            MinionDeallocate => "MinionDeallocate",
            Reply => "Reply",
            Audit => "Audit",
            MinionStats => "MinionStats",
            MinionHello => "MinionHello",
            BulkCopy => "BulkCopy",
        }
    }
}

/// Error classes carried in a `Reply`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum ErrorKind {
    NotOwner = 1,
    UnknownKey = 2,
    UnknownTarget = 3,
    TransferInFlight = 4,
    TransferAborted = 5,
    DestroyedWhileWaiting = 6,
    AccessDenied = 7,
    OutOfBounds = 8,
    BudgetExceeded = 9,
    DuplicateKey = 10,
    ProtocolViolation = 11,
    Unregistered = 12,
    MalformedEndpoint = 13,
    CopyFailed = 14,
    Timeout = 15,
    BadRequest = 16,
    Internal = 17,
    NotInGroup = 18,
    StillGranted = 19,
}

impl ErrorKind {
    pub fn from_code(code: u8) -> Option<Self> {
        use ErrorKind::*;
        Some(match code {
            1 => NotOwner,
            2 => UnknownKey,
            3 => UnknownTarget,
            4 => TransferInFlight,
            5 => TransferAborted,
            6 => DestroyedWhileWaiting,
            7 => AccessDenied,
            8 => OutOfBounds,
            9 => BudgetExceeded,
            10 => DuplicateKey,
            11 => ProtocolViolation,
            12 => Unregistered,
            13 => MalformedEndpoint,
            14 => CopyFailed,
            15 => Timeout,
            16 => BadRequest,
            17 => Internal,
            18 => NotInGroup,
            19 => StillGranted,
            _ => return None,
        })
    }
}

/// What a new grant holder needs to reach the object's bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grant {
    pub token: AccessToken,
    /// Shared-memory path of the segment, valid only while the grant lasts.
    pub segment: String,
    /// Endpoint of the minion holding the segment.
    pub minion: String,
    pub host_id: String,
    pub capacity: u64,
}

/// Payload byte counters of a minion or one of its segments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub payload_bytes_in: u64,
    pub payload_bytes_out: u64,
}

/// One row of the controller's audit snapshot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectoryEntry {
    pub key: CdiKey,
    pub capacity: u64,
    pub owner: ContainerId,
    pub container_group: BTreeSet<ContainerId>,
    pub host: HostId,
    /// Container currently granted access, if any.
    pub holder: Option<ContainerId>,
    pub transfer: Option<TransferRecord>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Reply {
    /// `1` on success, otherwise the operation's return code or `-1`.
    pub status: i32,
    pub error: Option<ErrorKind>,
    pub detail: Option<String>,
    pub grant: Option<Grant>,
    pub capacity: Option<u64>,
    pub data: Option<Vec<u8>>,
    pub counters: Option<Counters>,
    pub entries: Vec<DirectoryEntry>,
}

impl Reply {
    pub fn ok() -> Self {
        Reply {
            status: 1,
            ..Default::default()
        }
    }

    pub fn code(status: i32) -> Self {
        Reply {
            status,
            ..Default::default()
        }
    }

    pub fn error(kind: ErrorKind, detail: impl Into<String>) -> Self {
        Reply {
            status: -1,
            error: Some(kind),
            detail: Some(detail.into()),
            ..Default::default()
        }
    }

    pub fn is_ok(&self) -> bool {
        self.error.is_none()
    }

    pub fn with_grant(mut self, grant: Grant) -> Self {
        self.grant = Some(grant);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Register {
        container: ContainerId,
        container_endpoint: String,
        host_endpoint: String,
    },
    Create {
        container: ContainerId,
        key: CdiKey,
        size: u64,
    },
    Use {
        container: ContainerId,
        key: CdiKey,
    },
    Copy {
        container: ContainerId,
        key: CdiKey,
        new_key: CdiKey,
    },
    AccessWait {
        container: ContainerId,
        key: CdiKey,
        timeout_ms: Option<u64>,
    },
    AccessGrantNotify {
        key: CdiKey,
        grant: Grant,
    },
    Transfer {
        container: ContainerId,
        key: CdiKey,
        target: ContainerId,
    },
    Destroy {
        container: ContainerId,
        key: CdiKey,
    },
    Read {
        key: CdiKey,
        token: AccessToken,
        offset: u64,
        length: u64,
    },
    Write {
        key: CdiKey,
        token: AccessToken,
        offset: u64,
        payload: Vec<u8>,
    },
    MinionAllocate {
        key: CdiKey,
        size: u64,
        /// Initialize the new segment from this local segment instead of zeros.
        clone_from: Option<CdiKey>,
    },
    MinionRevoke {
        key: CdiKey,
    },
    MinionGrant {
        key: CdiKey,
        container: ContainerId,
    },
    MinionSetOwner {
        key: CdiKey,
        owner: ContainerId,
    },
    MinionCopyPush {
        key: CdiKey,
        dest_endpoint: String,
    },
    MinionDeallocate {
        key: CdiKey,
    },
    Reply(Reply),
    Audit,
    MinionStats {
        key: Option<CdiKey>,
    },
    MinionHello {
        host_id: String,
        endpoint: String,
    },
    /// Header of a bulk copy stream; raw payload bytes and a checksum trailer follow the frame.
    BulkCopy {
        key: CdiKey,
        total_bytes: u64,
        owner: ContainerId,
    },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Register { .. } => MsgType::Register,
            Message::Create { .. } => MsgType::Create,
            Message::Use { .. } => MsgType::Use,
            Message::Copy { .. } => MsgType::Copy,
            Message::AccessWait { .. } => MsgType::AccessWait,
            Message::AccessGrantNotify { .. } => MsgType::AccessGrantNotify,
            Message::Transfer { .. } => MsgType::Transfer,
            Message::Destroy { .. } => MsgType::Destroy,
            Message::Read { .. } => MsgType::Read,
            Message::Write { .. } => MsgType::Write,
            Message::MinionAllocate { .. } => MsgType::MinionAllocate,
            Message::MinionRevoke { .. } => MsgType::MinionRevoke,
            Message::MinionGrant { .. } => MsgType::MinionGrant,
            Message::MinionSetOwner { .. } => MsgType::MinionSetOwner,
            Message::MinionCopyPush { .. } => MsgType::MinionCopyPush,
            Message::MinionDeallocate { .. } => MsgType::MinionDeallocate,
            Message::Reply(_) => MsgType::Reply,
            Message::Audit => MsgType::Audit,
            Message::MinionStats { .. } => MsgType::MinionStats,
            Message::MinionHello { .. } => MsgType::MinionHello,
            Message::BulkCopy { .. } => MsgType::BulkCopy,
        }
    }
}

/// A message together with the request id it carries (or echoes, for replies).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub request_id: u64,
    pub message: Message,
}

impl Envelope {
    pub fn new(request_id: u64, message: Message) -> Self {
        Envelope {
            request_id,
            message,
        }
    }
}

/// Encode a complete frame with the default size ceiling.
pub fn encode(env: &Envelope) -> Result<Vec<u8>, WireError> {
    encode_with_limit(env, DEFAULT_MAX_FRAME)
}

pub fn encode_with_limit(env: &Envelope, max_body: usize) -> Result<Vec<u8>, WireError> {
    let mut buf = Vec::with_capacity(64 + payload_hint(&env.message));
    buf.extend_from_slice(&[0; 4]);
    buf.push(WIRE_VERSION);
    buf.push(env.message.msg_type() as u8);
    buf.extend_from_slice(&env.request_id.to_be_bytes());
    let mut w = FieldWriter::new(buf);
    write_fields(&mut w, &env.message);
    let mut buf = w.into_inner();
    let body_len = buf.len() - 4;
    if body_len > max_body {
        return Err(WireError::FrameTooLarge {
            len: body_len,
            max: max_body,
        });
    }
    buf[..4].copy_from_slice(&(body_len as u32).to_be_bytes());
    Ok(buf)
}

fn payload_hint(msg: &Message) -> usize {
    match msg {
        Message::Write { payload, .. } => payload.len(),
        Message::Reply(Reply { data: Some(d), .. }) => d.len(),
        _ => 0,
    }
}

fn write_grant(w: &mut FieldWriter, g: &Grant) {
    w.u128(tag::TOKEN, g.token.0);
    w.str(tag::SEGMENT, &g.segment);
    w.str(tag::HOST_ENDPOINT, &g.minion);
    w.str(tag::HOST_ID, &g.host_id);
    w.u64(tag::CAPACITY, g.capacity);
}

fn write_counters(w: &mut FieldWriter, c: &Counters) {
    w.u64(tag::BYTES_IN, c.payload_bytes_in);
    w.u64(tag::BYTES_OUT, c.payload_bytes_out);
}

fn write_entry(w: &mut FieldWriter, e: &DirectoryEntry) {
    w.str(tag::KEY, e.key.as_str());
    w.u64(tag::CAPACITY, e.capacity);
    w.u64(tag::OWNER, e.owner.0);
    for member in &e.container_group {
        w.u64(tag::MEMBER, member.0);
    }
    w.str(tag::HOST_ID, &e.host.0);
    if let Some(holder) = e.holder {
        w.u64(tag::HOLDER, holder.0);
    }
    if let Some(t) = &e.transfer {
        w.nested(tag::TRANSFER, |w| {
            w.str(tag::KEY, t.key.as_str());
            w.u64(tag::FROM, t.from.0);
            w.u64(tag::TO, t.to.0);
            w.u8(tag::PHASE, t.phase.index() as u8);
            w.u8(tag::SAME_HOST, u8::from(t.same_host));
        });
    }
}

fn write_fields(w: &mut FieldWriter, msg: &Message) {
    match msg {
        Message::Register {
            container,
            container_endpoint,
            host_endpoint,
        } => {
            w.u64(tag::CONTAINER, container.0);
            w.str(tag::CONTAINER_ENDPOINT, container_endpoint);
            w.str(tag::HOST_ENDPOINT, host_endpoint);
        }
        Message::Create {
            container,
            key,
            size,
        } => {
            w.u64(tag::CONTAINER, container.0);
            w.str(tag::KEY, key.as_str());
            w.u64(tag::SIZE, *size);
        }
        Message::Use { container, key } | Message::Destroy { container, key } => {
            w.u64(tag::CONTAINER, container.0);
            w.str(tag::KEY, key.as_str());
        }
        Message::Copy {
            container,
            key,
            new_key,
        } => {
            w.u64(tag::CONTAINER, container.0);
            w.str(tag::KEY, key.as_str());
            w.str(tag::NEW_KEY, new_key.as_str());
        }
        Message::AccessWait {
            container,
            key,
            timeout_ms,
        } => {
            w.u64(tag::CONTAINER, container.0);
            w.str(tag::KEY, key.as_str());
            if let Some(t) = timeout_ms {
                w.u64(tag::TIMEOUT_MS, *t);
            }
        }
        Message::AccessGrantNotify { key, grant } => {
            w.str(tag::KEY, key.as_str());
            w.nested(tag::GRANT, |w| write_grant(w, grant));
        }
        Message::Transfer {
            container,
            key,
            target,
        } => {
            w.u64(tag::CONTAINER, container.0);
            w.str(tag::KEY, key.as_str());
            w.u64(tag::TARGET, target.0);
        }
        Message::Read {
            key,
            token,
            offset,
            length,
        } => {
            w.str(tag::KEY, key.as_str());
            w.u128(tag::TOKEN, token.0);
            w.u64(tag::OFFSET, *offset);
            w.u64(tag::LENGTH, *length);
        }
        Message::Write {
            key,
            token,
            offset,
            payload,
        } => {
            w.str(tag::KEY, key.as_str());
            w.u128(tag::TOKEN, token.0);
            w.u64(tag::OFFSET, *offset);
            w.bytes(tag::PAYLOAD, payload);
        }
        Message::MinionAllocate {
            key,
            size,
            clone_from,
        } => {
            w.str(tag::KEY, key.as_str());
            w.u64(tag::SIZE, *size);
            if let Some(src) = clone_from {
                w.str(tag::CLONE_FROM, src.as_str());
            }
        }
        Message::MinionRevoke { key } | Message::MinionDeallocate { key } => {
            w.str(tag::KEY, key.as_str());
        }
        Message::MinionGrant { key, container } => {
            w.str(tag::KEY, key.as_str());
            w.u64(tag::CONTAINER, container.0);
        }
        Message::MinionSetOwner { key, owner } => {
            w.str(tag::KEY, key.as_str());
            w.u64(tag::OWNER, owner.0);
        }
        Message::MinionCopyPush { key, dest_endpoint } => {
            w.str(tag::KEY, key.as_str());
            w.str(tag::DEST_ENDPOINT, dest_endpoint);
        }
        Message::Reply(r) => {
            w.i32(tag::STATUS, r.status);
            if let Some(e) = r.error {
                w.u8(tag::ERROR, e as u8);
            }
            if let Some(d) = &r.detail {
                w.str(tag::DETAIL, d);
            }
            if let Some(g) = &r.grant {
                w.nested(tag::GRANT, |w| write_grant(w, g));
            }
            if let Some(c) = r.capacity {
                w.u64(tag::CAPACITY, c);
            }
            if let Some(d) = &r.data {
                w.bytes(tag::PAYLOAD, d);
            }
            if let Some(c) = &r.counters {
                w.nested(tag::COUNTERS, |w| write_counters(w, c));
            }
            for e in &r.entries {
                w.nested(tag::ENTRY, |w| write_entry(w, e));
            }
        }
        Message::Audit => {}
        Message::MinionStats { key } => {
            if let Some(k) = key {
                w.str(tag::KEY, k.as_str());
            }
        }
        Message::MinionHello { host_id, endpoint } => {
            w.str(tag::HOST_ID, host_id);
            w.str(tag::HOST_ENDPOINT, endpoint);
        }
        Message::BulkCopy {
            key,
            total_bytes,
            owner,
        } => {
            w.str(tag::KEY, key.as_str());
            w.u64(tag::TOTAL_BYTES, *total_bytes);
            w.u64(tag::OWNER, owner.0);
        }
    }
}

/// Decode one complete frame. Trailing bytes after the frame are an error.
pub fn decode(bytes: &[u8]) -> Result<Envelope, WireError> {
    decode_with_limit(bytes, DEFAULT_MAX_FRAME)
}

pub fn decode_with_limit(bytes: &[u8], max_body: usize) -> Result<Envelope, WireError> {
    if bytes.len() < 4 {
        return Err(WireError::Truncated {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let len = u32::from_be_bytes(bytes[..4].try_into().unwrap()) as usize;
    if len > max_body {
        return Err(WireError::FrameTooLarge { len, max: max_body });
    }
    let body = &bytes[4..];
    if body.len() < len {
        return Err(WireError::Truncated {
            expected: len,
            actual: body.len(),
        });
    }
    if body.len() > len {
        return Err(WireError::LengthMismatch {
            declared: len,
            actual: body.len(),
        });
    }
    decode_body(body)
}

/// Decode a frame body (everything after the length prefix).
pub fn decode_body(body: &[u8]) -> Result<Envelope, WireError> {
    if body.len() < 10 {
        return Err(WireError::Truncated {
            expected: 10,
            actual: body.len(),
        });
    }
    if body[0] != WIRE_VERSION {
        return Err(WireError::UnsupportedVersion(body[0]));
    }
    let msg_type = MsgType::from_code(body[1]).ok_or(WireError::UnknownType(body[1]))?;
    let request_id = u64::from_be_bytes(body[2..10].try_into().unwrap());
    let f = Fields::parse(msg_type.name(), &body[10..])?;
    let message = read_message(msg_type, &f)?;
    Ok(Envelope {
        request_id,
        message,
    })
}

fn key(f: &Fields<'_>, t: u8) -> Result<CdiKey, WireError> {
    CdiKey::new(f.str(t)?).map_err(|_| f.malformed(t))
}

fn container(f: &Fields<'_>, t: u8) -> Result<ContainerId, WireError> {
    Ok(ContainerId(f.u64(t)?))
}

fn read_grant(raw: &[u8]) -> Result<Grant, WireError> {
    let f = Fields::parse("Grant", raw)?;
    Ok(Grant {
        token: AccessToken(f.u128(tag::TOKEN)?),
        segment: f.str(tag::SEGMENT)?,
        minion: f.str(tag::HOST_ENDPOINT)?,
        host_id: f.str(tag::HOST_ID)?,
        capacity: f.u64(tag::CAPACITY)?,
    })
}

fn read_entry(raw: &[u8]) -> Result<DirectoryEntry, WireError> {
    let f = Fields::parse("DirectoryEntry", raw)?;
    let container_group = f
        .all(tag::MEMBER)
        .map(|raw| f.u64_raw(tag::MEMBER, raw).map(ContainerId))
        .collect::<Result<_, _>>()?;
    let transfer = match f.get(tag::TRANSFER) {
        None => None,
        Some(raw) => {
            let t = Fields::parse("TransferRecord", raw)?;
            let phase = *TransferPhase::ALL
                .get(t.u8(tag::PHASE)? as usize)
                .ok_or_else(|| t.malformed(tag::PHASE))?;
            let same_host = match t.u8(tag::SAME_HOST)? {
                0 => false,
                1 => true,
                _ => return Err(t.malformed(tag::SAME_HOST)),
            };
            Some(TransferRecord {
                key: key(&t, tag::KEY)?,
                from: container(&t, tag::FROM)?,
                to: container(&t, tag::TO)?,
                phase,
                same_host,
            })
        }
    };
    Ok(DirectoryEntry {
        key: key(&f, tag::KEY)?,
        capacity: f.u64(tag::CAPACITY)?,
        owner: container(&f, tag::OWNER)?,
        container_group,
        host: HostId(f.str(tag::HOST_ID)?),
        holder: f.opt_u64(tag::HOLDER)?.map(ContainerId),
        transfer,
    })
}

fn read_message(t: MsgType, f: &Fields<'_>) -> Result<Message, WireError> {
    Ok(match t {
        MsgType::Register => Message::Register {
            container: container(f, tag::CONTAINER)?,
            container_endpoint: f.str(tag::CONTAINER_ENDPOINT)?,
            host_endpoint: f.str(tag::HOST_ENDPOINT)?,
        },
        MsgType::Create => Message::Create {
            container: container(f, tag::CONTAINER)?,
            key: key(f, tag::KEY)?,
            size: f.u64(tag::SIZE)?,
        },
        MsgType::Use => Message::Use {
            container: container(f, tag::CONTAINER)?,
            key: key(f, tag::KEY)?,
        },
        MsgType::Copy => Message::Copy {
            container: container(f, tag::CONTAINER)?,
            key: key(f, tag::KEY)?,
            new_key: key(f, tag::NEW_KEY)?,
        },
        MsgType::AccessWait => Message::AccessWait {
            container: container(f, tag::CONTAINER)?,
            key: key(f, tag::KEY)?,
            timeout_ms: f.opt_u64(tag::TIMEOUT_MS)?,
        },
        MsgType::AccessGrantNotify => Message::AccessGrantNotify {
            key: key(f, tag::KEY)?,
            grant: read_grant(f.require(tag::GRANT)?)?,
        },
        MsgType::Transfer => Message::Transfer {
            container: container(f, tag::CONTAINER)?,
            key: key(f, tag::KEY)?,
            target: container(f, tag::TARGET)?,
        },
        MsgType::Destroy => Message::Destroy {
            container: container(f, tag::CONTAINER)?,
            key: key(f, tag::KEY)?,
        },
        MsgType::Read => Message::Read {
            key: key(f, tag::KEY)?,
            token: AccessToken(f.u128(tag::TOKEN)?),
            offset: f.u64(tag::OFFSET)?,
            length: f.u64(tag::LENGTH)?,
        },
        MsgType::Write => Message::Write {
            key: key(f, tag::KEY)?,
            token: AccessToken(f.u128(tag::TOKEN)?),
            offset: f.u64(tag::OFFSET)?,
            payload: f.require(tag::PAYLOAD)?.to_vec(),
        },
        MsgType::MinionAllocate => Message::MinionAllocate {
            key: key(f, tag::KEY)?,
            size: f.u64(tag::SIZE)?,
            clone_from: match f.get(tag::CLONE_FROM) {
                Some(_) => Some(key(f, tag::CLONE_FROM)?),
                None => None,
            },
        },
        MsgType::MinionRevoke => Message::MinionRevoke {
            key: key(f, tag::KEY)?,
        },
        MsgType::MinionGrant => Message::MinionGrant {
            key: key(f, tag::KEY)?,
            container: container(f, tag::CONTAINER)?,
        },
        MsgType::MinionSetOwner => Message::MinionSetOwner {
            key: key(f, tag::KEY)?,
            owner: container(f, tag::OWNER)?,
        },
        MsgType::MinionCopyPush => Message::MinionCopyPush {
            key: key(f, tag::KEY)?,
            dest_endpoint: f.str(tag::DEST_ENDPOINT)?,
        },
        MsgType::MinionDeallocate => Message::MinionDeallocate {
            key: key(f, tag::KEY)?,
        },
        MsgType::Reply => Message::Reply(Reply {
            status: f.i32(tag::STATUS)?,
            error: match f.get(tag::ERROR) {
                Some(_) => Some(
                    ErrorKind::from_code(f.u8(tag::ERROR)?).ok_or_else(|| f.malformed(tag::ERROR))?,
                ),
                None => None,
            },
            detail: f.opt_str(tag::DETAIL)?,
            grant: f.get(tag::GRANT).map(read_grant).transpose()?,
            capacity: f.opt_u64(tag::CAPACITY)?,
            data: f.get(tag::PAYLOAD).map(<[u8]>::to_vec),
            counters: match f.get(tag::COUNTERS) {
                Some(raw) => {
                    let c = Fields::parse("Counters", raw)?;
                    Some(Counters {
                        payload_bytes_in: c.u64(tag::BYTES_IN)?,
                        payload_bytes_out: c.u64(tag::BYTES_OUT)?,
                    })
                }
                None => None,
            },
            entries: f.all(tag::ENTRY).map(read_entry).collect::<Result<_, _>>()?,
        }),
        MsgType::Audit => Message::Audit,
        MsgType::MinionStats => Message::MinionStats {
            key: match f.get(tag::KEY) {
                Some(_) => Some(key(f, tag::KEY)?),
                None => None,
            },
        },
        MsgType::MinionHello => Message::MinionHello {
            host_id: f.str(tag::HOST_ID)?,
            endpoint: f.str(tag::HOST_ENDPOINT)?,
        },
        MsgType::BulkCopy => Message::BulkCopy {
            key: key(f, tag::KEY)?,
            total_bytes: f.u64(tag::TOTAL_BYTES)?,
            owner: container(f, tag::OWNER)?,
        },
    })
}

