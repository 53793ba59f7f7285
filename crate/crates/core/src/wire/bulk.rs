//! Bulk copy stream between minions.
//!
//! Layout: one `BulkCopy` frame carrying `{key, total_bytes, owner}`, then
//! exactly `total_bytes` raw payload bytes written in chunks of at most
//! [`BULK_CHUNK`], then a 4-byte big-endian CRC-32 of the payload.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{encode, Envelope, Message, WireError};
use crate::model::{CdiKey, ContainerId};

pub const BULK_CHUNK: usize = 1024 * 1024;

#[derive(Debug, Error)]
pub enum BulkError {
    #[error("checksum mismatch: sender {expected:08x}, received {actual:08x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("stream declares {declared} bytes but the destination holds {capacity}")]
    SizeMismatch { declared: u64, capacity: usize },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Stream `data` to `w`. `corrupt_bit` flips one payload bit on the wire
/// (after the checksum is taken) and exists for fault-injection tests.
pub fn send_bulk<W: Write>(
    w: &mut W,
    request_id: u64,
    key: &CdiKey,
    owner: ContainerId,
    data: &[u8],
    corrupt_bit: Option<u64>,
) -> Result<(), BulkError> {
    let header = encode(&Envelope::new(
        request_id,
        Message::BulkCopy {
            key: key.clone(),
            total_bytes: data.len() as u64,
            owner,
        },
    ))?;
    w.write_all(&header)?;
    let mut crc = crc32fast::Hasher::new();
    let mut offset = 0usize;
    for chunk in data.chunks(BULK_CHUNK) {
        crc.update(chunk);
        match corrupt_bit {
            Some(bit) if (bit / 8) as usize >= offset && ((bit / 8) as usize) < offset + chunk.len() => {
                let mut bad = chunk.to_vec();
                bad[(bit / 8) as usize - offset] ^= 1 << (bit % 8);
                w.write_all(&bad)?;
            }
            _ => w.write_all(chunk)?,
        }
        offset += chunk.len();
    }
    w.write_all(&crc.finalize().to_be_bytes())?;
    w.flush()?;
    Ok(())
}

/// Receive the payload announced by a `BulkCopy` header into `dest`, which
/// must be exactly `total_bytes` long, and verify the trailer checksum.
pub fn recv_bulk<R: Read>(r: &mut R, total_bytes: u64, dest: &mut [u8]) -> Result<(), BulkError> {
    if total_bytes != dest.len() as u64 {
        return Err(BulkError::SizeMismatch {
            declared: total_bytes,
            capacity: dest.len(),
        });
    }
    let mut crc = crc32fast::Hasher::new();
    for chunk in dest.chunks_mut(BULK_CHUNK) {
        r.read_exact(chunk)?;
        crc.update(chunk);
    }
    let mut trailer = [0u8; 4];
    r.read_exact(&mut trailer)?;
    let expected = u32::from_be_bytes(trailer);
    let actual = crc.finalize();
    if expected != actual {
        return Err(BulkError::Checksum { expected, actual });
    }
    Ok(())
}
