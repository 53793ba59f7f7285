//! Checks over directory snapshots.

use std::collections::HashSet;

use crate::transfer::TransferPhase;
use crate::wire::DirectoryEntry;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateKey(String),
    /// Access held by someone other than the owner, or while a transfer has
    /// already revoked the source.
    SingleOwner { key: String, detail: String },
    OwnerNotInGroup { key: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::DuplicateKey(k) => write!(f, "{k}: listed twice"),
            Violation::SingleOwner { key, detail } => write!(f, "{key}: SINGLE-OWNER: {detail}"),
            Violation::OwnerNotInGroup { key } => write!(f, "{key}: OWNER-IN-GROUP"),
        }
    }
}

/// SINGLE-OWNER for every entry, OWNER-IN-GROUP for entries with no transfer
/// in flight.
pub fn check_snapshot(entries: &[DirectoryEntry]) -> Vec<Violation> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for e in entries {
        let key = e.key.to_string();
        if !seen.insert(e.key.clone()) {
            out.push(Violation::DuplicateKey(key.clone()));
        }
        if let Some(holder) = e.holder {
            if holder != e.owner {
                out.push(Violation::SingleOwner {
                    key: key.clone(),
                    detail: format!("{holder} holds access but {} owns it", e.owner),
                });
            }
        }
        match &e.transfer {
            None => {
                if !e.container_group.contains(&e.owner) {
                    out.push(Violation::OwnerNotInGroup { key });
                }
            }
            Some(t) => {
                if t.phase != TransferPhase::Idle && e.holder.is_some() {
                    out.push(Violation::SingleOwner {
                        key: key.clone(),
                        detail: format!("access held in phase {:?}", t.phase),
                    });
                }
                if e.owner != t.from {
                    out.push(Violation::SingleOwner {
                        key,
                        detail: format!("owner {} changed before the grant", e.owner),
                    });
                }
            }
        }
    }
    out
}
