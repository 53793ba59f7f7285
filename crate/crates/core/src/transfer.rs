//! The ownership-transfer state machine.
//!
//! A cross-host transfer walks the five directives
//! `RevokeSrc → CopyPush → SetOwnerSrc → SetOwnerDst → GrantDst`. A same-host
//! transfer has no data to move and only one minion to update, so it walks
//! `RevokeSrc → SetOwnerSrc → GrantDst`. Between the revoke and the grant no
//! container holds access to the object, so there is never more than one.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{CdiKey, CdiObject, ContainerId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TransferPhase {
    Idle,
    RevokedSource,
    Copied,
    OwnerSetSource,
    OwnerSetDest,
    GrantedDest,
}

impl TransferPhase {
    pub const ALL: [TransferPhase; 6] = [
        TransferPhase::Idle,
        TransferPhase::RevokedSource,
        TransferPhase::Copied,
        TransferPhase::OwnerSetSource,
        TransferPhase::OwnerSetDest,
        TransferPhase::GrantedDest,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// One minion directive of a transfer; completing it is the event that advances the phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransferStep {
    RevokeSrc,
    CopyPush,
    SetOwnerSrc,
    SetOwnerDst,
    GrantDst,
}

impl TransferStep {
    pub const ALL: [TransferStep; 5] = [
        TransferStep::RevokeSrc,
        TransferStep::CopyPush,
        TransferStep::SetOwnerSrc,
        TransferStep::SetOwnerDst,
        TransferStep::GrantDst,
    ];

    /// The phase reached once this step has completed.
    pub fn completes(self) -> TransferPhase {
        match self {
            TransferStep::RevokeSrc => TransferPhase::RevokedSource,
            TransferStep::CopyPush => TransferPhase::Copied,
            TransferStep::SetOwnerSrc => TransferPhase::OwnerSetSource,
            TransferStep::SetOwnerDst => TransferPhase::OwnerSetDest,
            TransferStep::GrantDst => TransferPhase::GrantedDest,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransferStep::RevokeSrc => "RevokeSrc",
            TransferStep::CopyPush => "CopyPush",
            TransferStep::SetOwnerSrc => "SetOwnerSrc",
            TransferStep::SetOwnerDst => "SetOwnerDst",
            TransferStep::GrantDst => "GrantDst",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        TransferStep::ALL.into_iter().find(|s| s.name() == name)
    }
}

impl fmt::Display for TransferStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub const CROSS_HOST_STEPS: [TransferStep; 5] = TransferStep::ALL;

pub const SAME_HOST_STEPS: [TransferStep; 3] = [
    TransferStep::RevokeSrc,
    TransferStep::SetOwnerSrc,
    TransferStep::GrantDst,
];

/// Directive sequence for a transfer.
pub fn steps_for(same_host: bool) -> &'static [TransferStep] {
    if same_host {
        &SAME_HOST_STEPS
    } else {
        &CROSS_HOST_STEPS
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransferError {
    #[error("protocol violation: {step} is not valid in phase {phase:?}")]
    ProtocolViolation {
        phase: TransferPhase,
        step: TransferStep,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferDecision {
    Allow,
    AllowNoopSelf,
    DenyNotOwner,
    DenyUnregisteredTarget,
}

/// Decide whether `caller` may hand `obj` to `target`.
pub fn validate_transfer(
    obj: &CdiObject,
    caller: ContainerId,
    target: ContainerId,
    target_registered: bool,
) -> TransferDecision {
    if caller != obj.owner {
        TransferDecision::DenyNotOwner
    } else if target == caller {
        TransferDecision::AllowNoopSelf
    } else if !target_registered {
        TransferDecision::DenyUnregisteredTarget
    } else {
        TransferDecision::Allow
    }
}

/// In-flight state of one ownership transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub key: CdiKey,
    pub from: ContainerId,
    pub to: ContainerId,
    pub phase: TransferPhase,
    pub same_host: bool,
}

/// Where ownership lands after an aborted transfer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AbortPlan {
    pub owner: ContainerId,
    /// The destination already holds a (partial or full) copy that must be dropped.
    pub discard_destination: bool,
    /// The source minion's cached owner was already moved and must be reset.
    pub reset_source_owner: bool,
}

impl TransferRecord {
    pub fn new(key: CdiKey, from: ContainerId, to: ContainerId, same_host: bool) -> Self {
        TransferRecord {
            key,
            from,
            to,
            phase: TransferPhase::Idle,
            same_host,
        }
    }

    fn completed_steps(&self) -> usize {
        let path = steps_for(self.same_host);
        match self.phase {
            TransferPhase::Idle => 0,
            phase => path
                .iter()
                .position(|s| s.completes() == phase)
                .map(|i| i + 1)
                // A phase outside this path can only be reached by deserializing
                // a bogus record; treat it as terminal.
                .unwrap_or(path.len()),
        }
    }

    /// The directive that must complete next, `None` once granted.
    pub fn expected_step(&self) -> Option<TransferStep> {
        steps_for(self.same_host).get(self.completed_steps()).copied()
    }

    pub fn advance(&self, step: TransferStep) -> Result<TransferRecord, TransferError> {
        match self.expected_step() {
            Some(expected) if expected == step => Ok(TransferRecord {
                phase: step.completes(),
                ..self.clone()
            }),
            _ => Err(TransferError::ProtocolViolation {
                phase: self.phase,
                step,
            }),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.phase == TransferPhase::GrantedDest
    }

    /// The container holding access in the current phase, if any.
    pub fn access_holder(&self) -> Option<ContainerId> {
        match self.phase {
            TransferPhase::Idle => Some(self.from),
            TransferPhase::GrantedDest => Some(self.to),
            _ => None,
        }
    }

    /// The owner reported to clients: the source keeps ownership until the grant.
    pub fn reported_owner(&self) -> ContainerId {
        if self.is_complete() {
            self.to
        } else {
            self.from
        }
    }

    pub fn abort_plan(&self) -> AbortPlan {
        AbortPlan {
            owner: self.from,
            discard_destination: !self.same_host && self.phase >= TransferPhase::Copied,
            reset_source_owner: self.phase >= TransferPhase::OwnerSetSource,
        }
    }
}
