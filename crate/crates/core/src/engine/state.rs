use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::context::ContextStore;
use crate::dsl::NodePath;

/// Dotted branch identifier: the root is `0`, its children `0.1`, `0.2`, ...
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BranchId(String);

impl BranchId {
    pub fn root() -> Self {
        BranchId("0".into())
    }

    pub fn new(id: impl Into<String>) -> Self {
        BranchId(id.into())
    }

    pub fn child(&self, n: u32) -> Self {
        BranchId(format!("{}.{n}", self.0))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0 == "0"
    }

    /// The child ordinal if `self` is a direct child of `parent`.
    pub fn ordinal_under(&self, parent: &BranchId) -> Option<u32> {
        self.0.strip_prefix(parent.as_str())?.strip_prefix('.')?.parse().ok()
    }
}

impl fmt::Display for BranchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Ready,
    Running,
    Stopped,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchStatus {
    Active,
    Completed,
    Cancelled,
    WaitingJoin,
    InCritical(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchState {
    pub id: BranchId,
    /// Next node to execute. A path ending one past a parallel body marks
    /// a branch parked at that block's join.
    pub program_counter: NodePath,
    pub status: BranchStatus,
    pub parent: Option<BranchId>,
    /// Path of the parallel node whose join this branch reports to.
    pub join: Option<NodePath>,
    /// Ordinal of the last child forked by this branch.
    #[serde(default)]
    pub next_child: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceState {
    pub instance: String,
    pub lifecycle: Lifecycle,
    pub branches: BTreeMap<BranchId, BranchState>,
    pub store: ContextStore,
    /// Position (or `position@branch` on collision) → token.
    pub passthroughs: BTreeMap<String, String>,
    pub next_seq: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn branch_ids() {
        let r = BranchId::root();
        let c = r.child(3);
        assert_eq!(c.as_str(), "0.3");
        assert_eq!(c.ordinal_under(&r), Some(3));
        assert_eq!(c.child(1).ordinal_under(&r), None);
        assert_eq!(BranchId::new("0.10").ordinal_under(&BranchId::new("0.1")), None);
    }

    #[test]
    fn status_serialization() {
        let s = serde_json::to_string(&BranchStatus::InCritical("s".into())).unwrap();
        assert_eq!(s, r#"{"in_critical":"s"}"#);
        assert_eq!(serde_json::to_string(&BranchStatus::WaitingJoin).unwrap(), r#""waiting_join""#);
    }
}
