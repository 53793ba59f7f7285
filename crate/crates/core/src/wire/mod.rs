//! Binary framing shared by every connection in the system.
//!
//! A frame is a `u32` big-endian body length followed by the body:
//! `version: u8, msg_type: u8, request_id: u64 BE, fields...`. See
//! `docs/wire.md` for the byte-level layout. A corrupt length poisons the
//! stream; callers must close the connection on any decode error.

#[cfg(any(test, feature = "arbitrary"))]
pub mod arbitrary;
mod bulk;
mod message;
mod tlv;

use std::io::{self, Read, Write};

use thiserror::Error;

pub use bulk::{recv_bulk, send_bulk, BulkError, BULK_CHUNK};
pub use message::{
    decode, decode_body, decode_with_limit, encode, encode_with_limit, Counters,
    DirectoryEntry, Envelope, ErrorKind, Grant, Message, MsgType, Reply,
};

pub const WIRE_VERSION: u8 = 1;

/// Default ceiling on a frame body.
pub const DEFAULT_MAX_FRAME: usize = 64 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("truncated frame: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("frame length {declared} does not match {actual} body bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("frame body of {len} bytes exceeds the {max} byte ceiling")]
    FrameTooLarge { len: usize, max: usize },
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("unsupported wire version {0}")]
    UnsupportedVersion(u8),
    #[error("{msg}: missing field 0x{tag:02x}")]
    MissingField { msg: &'static str, tag: u8 },
    #[error("{msg}: malformed field 0x{tag:02x}")]
    MalformedField { msg: &'static str, tag: u8 },
    #[error("connection closed")]
    Closed,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireError {
    /// Whether this error came from the transport rather than the frame contents.
    pub fn is_io(&self) -> bool {
        matches!(self, WireError::Io(_) | WireError::Closed)
    }
}

pub fn write_envelope<W: Write>(w: &mut W, env: &Envelope) -> Result<(), WireError> {
    let frame = encode(env)?;
    w.write_all(&frame)?;
    Ok(())
}

/// Read one frame from a stream. A clean EOF before the length prefix yields
/// [`WireError::Closed`].
pub fn read_envelope<R: Read>(r: &mut R, max_body: usize) -> Result<Envelope, WireError> {
    let mut len = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut len[got..]) {
            Ok(0) if got == 0 => return Err(WireError::Closed),
            Ok(0) => {
                return Err(WireError::Truncated {
                    expected: 4,
                    actual: got,
                })
            }
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > max_body {
        return Err(WireError::FrameTooLarge { len, max: max_body });
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => WireError::Truncated {
            expected: len,
            actual: 0,
        },
        _ => WireError::Io(e),
    })?;
    decode_body(&body)
}
