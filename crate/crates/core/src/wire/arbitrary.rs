//! Proptest strategies for every wire message, shared by the unit tests and
//! downstream acceptance tests.

use std::collections::BTreeSet;

use proptest::prelude::*;

use super::{Counters, DirectoryEntry, ErrorKind, Grant, Message, Reply};
use crate::model::{AccessToken, CdiKey, ContainerId, HostId};
use crate::transfer::{TransferPhase, TransferRecord};

pub fn arb_key() -> impl Strategy<Value = CdiKey> {
    "[a-zA-Z0-9_./-]{1,40}".prop_map(|s| CdiKey::new(s).unwrap())
}

pub fn arb_container() -> impl Strategy<Value = ContainerId> {
    any::<u64>().prop_map(ContainerId)
}

pub fn arb_grant() -> impl Strategy<Value = Grant> {
    (any::<u128>(), ".{0,20}", ".{0,20}", ".{0,10}", any::<u64>()).prop_map(
        |(t, segment, minion, host_id, capacity)| Grant {
            token: AccessToken(t),
            segment,
            minion,
            host_id,
            capacity,
        },
    )
}

pub fn arb_entry() -> impl Strategy<Value = DirectoryEntry> {
    (
        arb_key(),
        any::<u64>(),
        arb_container(),
        proptest::collection::btree_set(arb_container(), 0..4),
        ".{0,10}",
        proptest::option::of(arb_container()),
        proptest::option::of((arb_container(), arb_container(), 0usize..6, any::<bool>())),
    )
        .prop_map(|(key, capacity, owner, group, host, holder, t)| {
            let transfer = t.map(|(from, to, phase, same_host)| TransferRecord {
                key: key.clone(),
                from,
                to,
                phase: TransferPhase::ALL[phase],
                same_host,
            });
            DirectoryEntry {
                key,
                capacity,
                owner,
                container_group: group.into_iter().collect::<BTreeSet<_>>(),
                host: HostId(host),
                holder,
                transfer,
            }
        })
}

pub fn arb_reply() -> impl Strategy<Value = Reply> {
    (
        any::<i32>(),
        proptest::option::of(1u8..=19),
        proptest::option::of(".{0,20}"),
        proptest::option::of(arb_grant()),
        proptest::option::of(any::<u64>()),
        proptest::option::of(proptest::collection::vec(any::<u8>(), 0..64)),
        proptest::option::of((any::<u64>(), any::<u64>())),
        proptest::collection::vec(arb_entry(), 0..3),
    )
        .prop_map(
            |(status, error, detail, grant, capacity, data, counters, entries)| Reply {
                status,
                error: error.and_then(ErrorKind::from_code),
                detail,
                grant,
                capacity,
                data,
                counters: counters.map(|(i, o)| Counters {
                    payload_bytes_in: i,
                    payload_bytes_out: o,
                }),
                entries,
            },
        )
}

pub fn arb_message() -> impl Strategy<Value = Message> {
    let c = arb_container;
    prop_oneof![
        (c(), ".{0,30}", ".{0,30}").prop_map(|(container, a, b)| Message::Register {
            container,
            container_endpoint: a,
            host_endpoint: b
        }),
        (c(), arb_key(), any::<u64>()).prop_map(|(container, key, size)| Message::Create {
            container,
            key,
            size
        }),
        (c(), arb_key()).prop_map(|(container, key)| Message::Use { container, key }),
        (c(), arb_key(), arb_key()).prop_map(|(container, key, new_key)| Message::Copy {
            container,
            key,
            new_key
        }),
        (c(), arb_key(), proptest::option::of(any::<u64>())).prop_map(
            |(container, key, timeout_ms)| Message::AccessWait {
                container,
                key,
                timeout_ms
            }
        ),
        (arb_key(), arb_grant()).prop_map(|(key, grant)| Message::AccessGrantNotify { key, grant }),
        (c(), arb_key(), c()).prop_map(|(container, key, target)| Message::Transfer {
            container,
            key,
            target
        }),
        (c(), arb_key()).prop_map(|(container, key)| Message::Destroy { container, key }),
        (arb_key(), any::<u128>(), any::<u64>(), any::<u64>()).prop_map(
            |(key, t, offset, length)| Message::Read {
                key,
                token: AccessToken(t),
                offset,
                length
            }
        ),
        (
            arb_key(),
            any::<u128>(),
            any::<u64>(),
            proptest::collection::vec(any::<u8>(), 0..128)
        )
            .prop_map(|(key, t, offset, payload)| Message::Write {
                key,
                token: AccessToken(t),
                offset,
                payload
            }),
        (arb_key(), any::<u64>(), proptest::option::of(arb_key())).prop_map(
            |(key, size, clone_from)| Message::MinionAllocate {
                key,
                size,
                clone_from
            }
        ),
        arb_key().prop_map(|key| Message::MinionRevoke { key }),
        (arb_key(), c()).prop_map(|(key, container)| Message::MinionGrant { key, container }),
        (arb_key(), c()).prop_map(|(key, owner)| Message::MinionSetOwner { key, owner }),
        (arb_key(), ".{0,30}").prop_map(|(key, dest_endpoint)| Message::MinionCopyPush {
            key,
            dest_endpoint
        }),
        arb_key().prop_map(|key| Message::MinionDeallocate { key }),
        arb_reply().prop_map(Message::Reply),
        Just(Message::Audit),
        proptest::option::of(arb_key()).prop_map(|key| Message::MinionStats { key }),
        (".{0,20}", ".{0,20}").prop_map(|(host_id, endpoint)| Message::MinionHello {
            host_id,
            endpoint
        }),
        (arb_key(), any::<u64>(), c()).prop_map(|(key, total_bytes, owner)| Message::BulkCopy {
            key,
            total_bytes,
            owner
        }),
    ]
}
