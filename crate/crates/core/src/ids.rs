//! Compact identifiers shared across the tree, protocol, and simulation
//! layers. Node ids are globally unique: the upper bits carry the owning
//! scope so sealed messages from different subgroups can never alias.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Key-distribution scope: 0 is the whole group (base station level),
/// 1.. are subgroups in layout order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default,
)]
pub struct ScopeId(pub u32);

impl ScopeId {
    pub const GROUP: ScopeId = ScopeId(0);

    pub fn is_group(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for ScopeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_group() {
            write!(f, "group")
        } else {
            write!(f, "sn{}", self.0)
        }
    }
}

/// A key-tree node. Never reused within a run.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct NodeId(pub u64);

impl NodeId {
    pub fn new(scope: ScopeId, seq: u32) -> Self {
        NodeId(((scope.0 as u64) << 32) | seq as u64)
    }

    pub fn scope(self) -> ScopeId {
        ScopeId((self.0 >> 32) as u32)
    }

    pub fn seq(self) -> u32 {
        self.0 as u32
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}.{}", self.scope().0, self.seq())
    }
}

/// A member, interned by the harness; names live in the registry.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub struct MemberId(pub u32);

impl fmt::Display for MemberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m{}", self.0)
    }
}

/// Any party that can receive a message.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
pub enum Principal {
    Member(MemberId),
    Sn(ScopeId),
    Bs,
}

impl fmt::Display for Principal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Principal::Member(m) => write!(f, "{m}"),
            Principal::Sn(s) => write!(f, "{s}"),
            Principal::Bs => write!(f, "bs"),
        }
    }
}
