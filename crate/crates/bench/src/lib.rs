//! Benchmark fixtures.

use cdi_core::model::{AccessToken, CdiKey, ContainerId};
use cdi_core::wire::{Envelope, Message};

pub fn write_message(size: usize) -> Envelope {
    Envelope::new(
        7,
        Message::Write {
            key: CdiKey::new("bench").unwrap(),
            token: AccessToken(0x1234),
            offset: 0,
            payload: vec![0x5a; size],
        },
    )
}

pub fn transfer_message() -> Envelope {
    Envelope::new(
        1,
        Message::Transfer {
            container: ContainerId(1),
            key: CdiKey::new("frame-0").unwrap(),
            target: ContainerId(2),
        },
    )
}
