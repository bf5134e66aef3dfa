//! Supervised workflow context.
//!
//! Every committed change is appended to a change log with a gap-free
//! sequence number; the store's version is the sequence number of the last
//! change. Folding the log over the initial values reproduces the current
//! values.

use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dsl::PositionId;
use crate::expr::{eval, Bindings, Change, EvalError, Expr, Value, Values};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeRecord {
    pub seq: u64,
    pub position: PositionId,
    pub name: String,
    pub old: Value,
    pub new: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ContextError {
    #[error("duplicate context variable `{0}`")]
    Duplicate(String),
    #[error("initialiser of `{name}`: {source}")]
    Initializer { name: String, source: EvalError },
    #[error("unknown context variable `{0}`")]
    Unknown(String),
}

/// A consistent point-in-time view.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    pub values: Values,
    pub version: u64,
}

impl Bindings for Snapshot {
    fn lookup(&self, name: &str) -> Option<&Value> {
        self.values.get(name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContextStore {
    initial: Values,
    values: Values,
    base_version: u64,
    log: Vec<ChangeRecord>,
}

impl ContextStore {
    /// Evaluates initialisers in declaration order; each may refer to the
    /// variables declared before it.
    pub fn init(decls: &[(String, Expr)]) -> Result<Self, ContextError> {
        let mut values = Values::new();
        for (name, init) in decls {
            if values.contains_key(name) {
                return Err(ContextError::Duplicate(name.clone()));
            }
            let v = eval(init, &values).map_err(|source| ContextError::Initializer { name: name.clone(), source })?;
            values.insert(name.clone(), v);
        }
        Ok(Self::restore(values, 0))
    }

    /// A store continuing from saved values at `version`, with an empty log.
    pub fn restore(values: Values, version: u64) -> Self {
        ContextStore { initial: values.clone(), values, base_version: version, log: Vec::new() }
    }

    /// Replaces declared values before anything has been committed.
    pub fn override_values(&mut self, overrides: &Values) -> Result<(), ContextError> {
        for (name, v) in overrides {
            let slot = self.values.get_mut(name).ok_or_else(|| ContextError::Unknown(name.clone()))?;
            *slot = v.clone();
        }
        if self.log.is_empty() {
            self.initial = self.values.clone();
        }
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.base_version + self.log.len() as u64
    }

    pub fn base_version(&self) -> u64 {
        self.base_version
    }

    pub fn values(&self) -> &Values {
        &self.values
    }

    pub fn initial_values(&self) -> &Values {
        &self.initial
    }

    pub fn change_log(&self) -> &[ChangeRecord] {
        &self.log
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { values: self.values.clone(), version: self.version() }
    }

    /// Appends `delta` with consecutive sequence numbers and returns the new
    /// records. Callers hold the commit right; every name in `delta` must be
    /// declared.
    pub fn commit(&mut self, delta: Vec<Change>, position: &PositionId) -> &[ChangeRecord] {
        let start = self.log.len();
        for change in delta {
            let seq = self.version() + 1;
            let slot = self.values.get_mut(&change.name).expect("committed change names a declared variable");
            *slot = change.new.clone();
            self.log.push(ChangeRecord {
                seq,
                position: position.clone(),
                name: change.name,
                old: change.old,
                new: change.new,
            });
        }
        &self.log[start..]
    }

    /// Folds the change log over the initial values.
    pub fn replay(&self) -> Values {
        replay(&self.initial, &self.log)
    }
}

pub fn replay(initial: &Values, log: &[ChangeRecord]) -> Values {
    let mut values = initial.clone();
    for rec in log {
        values.insert(rec.name.clone(), rec.new.clone());
    }
    values
}

/// The store as shared by all branches of one instance.
///
/// Snapshots take a read lock; a transaction holds the write lock across
/// evaluation and commit, so readers see all of a delta or none of it.
#[derive(Debug)]
pub struct SharedContext {
    inner: RwLock<ContextStore>,
}

impl SharedContext {
    pub fn new(store: ContextStore) -> Self {
        SharedContext { inner: RwLock::new(store) }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.inner.read().expect("context lock poisoned").snapshot()
    }

    /// Runs `compute` against the current values and commits its delta
    /// atomically. `committed` sees the new records while the write lock is
    /// still held, which keeps anything it emits in sequence order.
    pub fn transact<E>(
        &self,
        position: &PositionId,
        compute: impl FnOnce(&Values) -> Result<Vec<Change>, E>,
        committed: impl FnOnce(&[ChangeRecord], u64),
    ) -> Result<usize, E> {
        let mut store = self.inner.write().expect("context lock poisoned");
        let delta = compute(store.values())?;
        let records = store.commit(delta, position);
        let n = records.len();
        let version = records.last().map_or(0, |r| r.seq);
        committed(records, version);
        Ok(n)
    }

    pub fn store(&self) -> ContextStore {
        self.inner.read().expect("context lock poisoned").clone()
    }
}
