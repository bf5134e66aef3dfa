//! On-disk form of a stopped instance.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::context::ContextStore;
use crate::dsl::NodePath;
use crate::engine::{BranchId, BranchState, BranchStatus, InstanceState, Lifecycle};
use crate::expr::Values;

#[derive(Debug, Error)]
pub enum SavedError {
    #[error("saved instance is malformed: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("workflow source changed since the instance was saved (saved {saved}, now {actual})")]
    HashMismatch { saved: String, actual: String },
    #[error("saved instance is inconsistent: {0}")]
    Corrupt(String),
}

pub fn source_hash(source: &str) -> String {
    hex::encode(Sha256::digest(source.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedBranch {
    pub id: BranchId,
    pub path: NodePath,
    pub status: BranchStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<BranchId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join: Option<NodePath>,
    #[serde(default)]
    pub next_child: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SavedInstance {
    pub hash: String,
    pub lifecycle: Lifecycle,
    pub branches: Vec<SavedBranch>,
    pub context: Values,
    pub version: u64,
    pub passthroughs: BTreeMap<String, String>,
    #[serde(default)]
    pub instance: String,
    #[serde(default)]
    pub next_seq: u64,
    /// Path of the workflow source, for convenience when resuming.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workflow: Option<String>,
}

impl SavedInstance {
    pub fn new(source: &str, state: &InstanceState) -> Self {
        SavedInstance {
            hash: source_hash(source),
            lifecycle: state.lifecycle,
            branches: state
                .branches
                .values()
                .map(|b| SavedBranch {
                    id: b.id.clone(),
                    path: b.program_counter.clone(),
                    status: b.status.clone(),
                    parent: b.parent.clone(),
                    join: b.join.clone(),
                    next_child: b.next_child,
                })
                .collect(),
            context: state.store.values().clone(),
            version: state.store.version(),
            passthroughs: state.passthroughs.clone(),
            instance: state.instance.clone(),
            next_seq: state.next_seq,
            workflow: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SavedError> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("saved instance serializes")
    }

    pub fn verify_source(&self, source: &str) -> Result<(), SavedError> {
        let actual = source_hash(source);
        if actual != self.hash {
            return Err(SavedError::HashMismatch { saved: self.hash.clone(), actual });
        }
        Ok(())
    }

    /// Checks the source hash and rebuilds the engine's view of the instance.
    pub fn into_state(self, source: &str) -> Result<InstanceState, SavedError> {
        self.verify_source(source)?;
        let mut branches = BTreeMap::new();
        for b in self.branches {
            if let Some(p) = &b.parent {
                if b.id.ordinal_under(p).is_none() {
                    return Err(SavedError::Corrupt(format!("branch {} is not a child of {p}", b.id)));
                }
            } else if !b.id.is_root() {
                return Err(SavedError::Corrupt(format!("branch {} has no parent", b.id)));
            }
            let state = BranchState {
                id: b.id.clone(),
                program_counter: b.path,
                status: b.status,
                parent: b.parent,
                join: b.join,
                next_child: b.next_child,
            };
            if branches.insert(b.id.clone(), state).is_some() {
                return Err(SavedError::Corrupt(format!("branch {} listed twice", b.id)));
            }
        }
        if !branches.contains_key(&BranchId::root()) {
            return Err(SavedError::Corrupt("no root branch".into()));
        }
        for b in branches.values() {
            if let Some(p) = &b.parent {
                if !branches.contains_key(p) {
                    return Err(SavedError::Corrupt(format!("parent {p} of branch {} is missing", b.id)));
                }
            }
        }
        Ok(InstanceState {
            instance: self.instance,
            lifecycle: self.lifecycle,
            branches,
            store: ContextStore::restore(self.context, self.version),
            passthroughs: self.passthroughs,
            next_seq: self.next_seq,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::Value;

    fn state() -> InstanceState {
        let root = BranchState {
            id: BranchId::root(),
            program_counter: vec![1, 2],
            status: BranchStatus::WaitingJoin,
            parent: None,
            join: None,
            next_child: 1,
        };
        let child = BranchState {
            id: BranchId::root().child(1),
            program_counter: vec![1, 0, 0, 1],
            status: BranchStatus::InCritical("s".into()),
            parent: Some(BranchId::root()),
            join: Some(vec![1]),
            next_child: 0,
        };
        InstanceState {
            instance: "i-1".into(),
            lifecycle: Lifecycle::Stopped,
            branches: [(root.id.clone(), root), (child.id.clone(), child)].into(),
            store: ContextStore::restore([("x".to_string(), Value::Integer(4))].into(), 3),
            passthroughs: [("b".to_string(), "mock:b:1".to_string())].into(),
            next_seq: 17,
        }
    }

    #[test]
    fn round_trip_through_json() {
        let saved = SavedInstance::new("src", &state());
        let text = saved.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["lifecycle"], "stopped");
        assert_eq!(v["branches"][1]["path"], serde_json::json!([1, 0, 0, 1]));
        assert_eq!(v["passthroughs"]["b"], "mock:b:1");
        let back = SavedInstance::from_json(&text).unwrap().into_state("src").unwrap();
        let orig = state();
        assert_eq!(back.branches, orig.branches);
        assert_eq!(back.store.values(), orig.store.values());
        assert_eq!(back.store.version(), 3);
        assert_eq!(back.next_seq, 17);
    }

    #[test]
    fn edited_source_is_rejected() {
        let saved = SavedInstance::new("src", &state());
        assert!(matches!(saved.into_state("src "), Err(SavedError::HashMismatch { .. })));
    }

    #[test]
    fn minimal_schema_loads() {
        let text = format!(
            r#"{{"hash": "{}", "lifecycle": "stopped", "branches": [{{"id": "0", "path": [1], "status": "active"}}],
                "context": {{"x": 1}}, "version": 2, "passthroughs": {{}}}}"#,
            source_hash("w")
        );
        let st = SavedInstance::from_json(&text).unwrap().into_state("w").unwrap();
        assert_eq!(st.branches[&BranchId::root()].program_counter, vec![1]);
    }

    #[test]
    fn orphan_branch_is_corrupt() {
        let mut saved = SavedInstance::new("w", &state());
        saved.branches.remove(0);
        assert!(matches!(saved.into_state("w"), Err(SavedError::Corrupt(_))));
    }
}
