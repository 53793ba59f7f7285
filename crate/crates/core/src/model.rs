//! Domain types shared by the controller, the minions and the client SDK.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest accepted key, in bytes.
pub const MAX_KEY_LEN: usize = 255;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("key must not be empty")]
    Empty,
    #[error("key is {0} bytes long, the limit is {MAX_KEY_LEN}")]
    TooLong(usize),
}

/// Application-scoped name of a CDI object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CdiKey(String);

impl CdiKey {
    pub fn new(value: impl Into<String>) -> Result<Self, KeyError> {
        let value = value.into();
        if value.is_empty() {
            return Err(KeyError::Empty);
        }
        if value.len() > MAX_KEY_LEN {
            return Err(KeyError::TooLong(value.len()));
        }
        Ok(CdiKey(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for CdiKey {
    type Error = KeyError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        CdiKey::new(value)
    }
}

impl TryFrom<&str> for CdiKey {
    type Error = KeyError;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        CdiKey::new(value)
    }
}

impl From<CdiKey> for String {
    fn from(key: CdiKey) -> String {
        key.0
    }
}

impl fmt::Display for CdiKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Integer identity of an application container, assigned at configuration time.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ContainerId(pub u64);

impl fmt::Display for ContainerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identity of a host, i.e. of the minion serving it. The minion's listen
/// endpoint doubles as its identity on the control plane.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostId(pub String);

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The three-valued result of `create`, `use` and `copy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReturnCode {
    /// 1: the operation succeeded.
    Success,
    /// 0: key-existence conflict (the key exists for create/copy, or is missing for use).
    Conflict,
    /// -1: the object could not be created for any other reason.
    Failure,
}

impl ReturnCode {
    pub fn value(self) -> i32 {
        match self {
            ReturnCode::Success => 1,
            ReturnCode::Conflict => 0,
            ReturnCode::Failure => -1,
        }
    }

    pub fn from_value(value: i32) -> Option<Self> {
        match value {
            1 => Some(ReturnCode::Success),
            0 => Some(ReturnCode::Conflict),
            -1 => Some(ReturnCode::Failure),
            _ => None,
        }
    }
}

impl fmt::Display for ReturnCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

/// A 128-bit capability proving its bearer is the current grant holder of a segment.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccessToken(pub u128);

impl AccessToken {
    pub fn random() -> Self {
        AccessToken(rand::random())
    }

    pub fn to_hex(self) -> String {
        format!("{:032x}", self.0)
    }
}

// Tokens are secrets; keep them out of logs.
impl fmt::Debug for AccessToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccessToken({:08x}..)", (self.0 >> 96) as u32)
    }
}

/// A CDI object as seen by the authority on ownership.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CdiObject {
    pub key: CdiKey,
    pub capacity: u64,
    pub owner: ContainerId,
    pub container_group: BTreeSet<ContainerId>,
    pub host: HostId,
}

impl CdiObject {
    /// A freshly created object: the creator owns it and is the only group member.
    pub fn new(key: CdiKey, capacity: u64, owner: ContainerId, host: HostId) -> Self {
        let mut container_group = BTreeSet::new();
        container_group.insert(owner);
        CdiObject {
            key,
            capacity,
            owner,
            container_group,
            host,
        }
    }

    pub fn owner_in_group(&self) -> bool {
        self.container_group.contains(&self.owner)
    }

    /// Group membership only grows.
    pub fn join(&mut self, container: ContainerId) -> bool {
        self.container_group.insert(container)
    }
}
