//! Version counters and the access/termination discipline shared by the
//! OptSVA-CF engine and the SVA baseline.
//!
//! Each object carries three counters: `gv` (last private version granted),
//! `lv` (pv of the transaction that last released the object) and `ltv` (pv
//! of the transaction that last committed or aborted on it). A transaction
//! holding private version `pv` may touch the object directly once
//! `pv - 1 == lv` and may terminate on it once `pv - 1 == ltv`.
//!
//! Invariant: `ltv <= lv <= gv`, and `lv`, `ltv` never decrease.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};

use serde::{Deserialize, Serialize};

use crate::ids::{ObjectId, TxnId, Version};

/// Upper bound on a number of operations; `Infinite` when not declared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bound {
    Finite(u64),
    Infinite,
}

impl Bound {
    pub fn from_option(v: Option<u64>) -> Self {
        v.map_or(Bound::Infinite, Bound::Finite)
    }

    pub fn is_zero(self) -> bool {
        self == Bound::Finite(0)
    }

    /// True once `count` operations have used the bound up.
    pub fn reached_by(self, count: u64) -> bool {
        matches!(self, Bound::Finite(n) if count >= n)
    }

    pub fn plus(self, other: Bound) -> Bound {
        match (self, other) {
            (Bound::Finite(a), Bound::Finite(b)) => Bound::Finite(a + b),
            _ => Bound::Infinite,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Finite(n) => write!(f, "{n}"),
            Bound::Infinite => write!(f, "inf"),
        }
    }
}

/// Declared maximum number of reads, writes and updates a transaction will
/// perform on one object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Suprema {
    pub max_reads: Bound,
    pub max_writes: Bound,
    pub max_updates: Bound,
}

impl Default for Suprema {
    fn default() -> Self {
        Suprema::unbounded()
    }
}

impl Suprema {
    pub fn new(max_reads: u64, max_writes: u64, max_updates: u64) -> Self {
        Suprema {
            max_reads: Bound::Finite(max_reads),
            max_writes: Bound::Finite(max_writes),
            max_updates: Bound::Finite(max_updates),
        }
    }

    pub fn unbounded() -> Self {
        Suprema {
            max_reads: Bound::Infinite,
            max_writes: Bound::Infinite,
            max_updates: Bound::Infinite,
        }
    }

    pub fn reads(n: Option<u64>) -> Self {
        Suprema {
            max_reads: Bound::from_option(n),
            max_writes: Bound::Finite(0),
            max_updates: Bound::Finite(0),
        }
    }

    pub fn writes(n: Option<u64>) -> Self {
        Suprema {
            max_reads: Bound::Finite(0),
            max_writes: Bound::from_option(n),
            max_updates: Bound::Finite(0),
        }
    }

    pub fn updates(n: Option<u64>) -> Self {
        Suprema {
            max_reads: Bound::Finite(0),
            max_writes: Bound::Finite(0),
            max_updates: Bound::from_option(n),
        }
    }

    /// Total supremum over all operation kinds.
    pub fn ub(&self) -> Bound {
        self.max_reads.plus(self.max_writes).plus(self.max_updates)
    }

    /// Supremum over operations that modify state.
    pub fn wub(&self) -> Bound {
        self.max_writes.plus(self.max_updates)
    }

    pub fn is_read_only(&self) -> bool {
        self.max_writes.is_zero() && self.max_updates.is_zero() && !self.max_reads.is_zero()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub lv: Version,
    pub ltv: Version,
}

pub fn eval_access(pv: Version, lv: Version) -> bool {
    debug_assert!(pv >= 1);
    pv - 1 == lv
}

pub fn eval_termination(pv: Version, ltv: Version) -> bool {
    debug_assert!(pv >= 1);
    pv - 1 == ltv
}

/// A wait condition over one object's counters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Condition {
    Access(Version),
    Termination(Version),
}

impl Condition {
    /// Irrevocable transactions wait for termination wherever others wait
    /// for access.
    pub fn access_for(pv: Version, irrevocable: bool) -> Self {
        if irrevocable {
            Condition::Termination(pv)
        } else {
            Condition::Access(pv)
        }
    }

    pub fn holds(&self, c: Counters) -> bool {
        match *self {
            Condition::Access(pv) => eval_access(pv, c.lv),
            Condition::Termination(pv) => eval_termination(pv, c.ltv),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VersionError {
    #[error("unknown object `{0}`")]
    UnknownObject(ObjectId),
    #[error("object `{0}` declared twice")]
    Duplicate(ObjectId),
    #[error("release of `{object}` with pv {pv} while lv is {lv}")]
    OutOfOrderRelease { object: ObjectId, pv: Version, lv: Version },
    #[error("termination on `{object}` with pv {pv} while ltv is {ltv}")]
    OutOfOrderFinalize { object: ObjectId, pv: Version, ltv: Version },
    #[error("version lock on `{object}` not held by {txn}")]
    NotLockHolder { object: ObjectId, txn: TxnId },
    #[error("wait cancelled")]
    Cancelled,
}

/// Notified after every `lv`/`ltv` mutation.
pub trait CounterObserver: Send + Sync {
    fn on_counter_change(&self, object: &ObjectId);
}

#[derive(Debug, Default)]
struct VersionLock {
    gv: Version,
    holder: Option<TxnId>,
}

/// Version counters of one object on its home node.
pub struct VersionedObject {
    id: ObjectId,
    version_lock: Mutex<VersionLock>,
    version_cv: Condvar,
    counters: Mutex<Counters>,
    counters_cv: Condvar,
    observer: Mutex<Option<Weak<dyn CounterObserver>>>,
}

impl fmt::Debug for VersionedObject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("VersionedObject")
            .field("id", &self.id)
            .field("gv", &self.gv())
            .field("counters", &self.counters())
            .finish()
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl VersionedObject {
    pub fn new(id: ObjectId) -> Self {
        VersionedObject {
            id,
            version_lock: Mutex::new(VersionLock::default()),
            version_cv: Condvar::new(),
            counters: Mutex::new(Counters::default()),
            counters_cv: Condvar::new(),
            observer: Mutex::new(None),
        }
    }

    pub fn id(&self) -> &ObjectId {
        &self.id
    }

    pub fn set_observer(&self, observer: Weak<dyn CounterObserver>) {
        *lock(&self.observer) = Some(observer);
    }

    pub fn counters(&self) -> Counters {
        *lock(&self.counters)
    }

    pub fn gv(&self) -> Version {
        lock(&self.version_lock).gv
    }

    /// Takes the version lock for `txn`, blocking while another transaction
    /// holds it. Re-entrant for the same transaction.
    pub fn lock_version(&self, txn: TxnId) {
        let mut vl = lock(&self.version_lock);
        while let Some(holder) = vl.holder {
            if holder == txn {
                return;
            }
            vl = self.version_cv.wait(vl).unwrap_or_else(|e| e.into_inner());
        }
        vl.holder = Some(txn);
    }

    /// Grants the next private version to the lock holder and drops the lock.
    pub fn grant_version(&self, txn: TxnId) -> Result<Version, VersionError> {
        let mut vl = lock(&self.version_lock);
        if vl.holder != Some(txn) {
            return Err(VersionError::NotLockHolder {
                object: self.id.clone(),
                txn,
            });
        }
        vl.gv += 1;
        vl.holder = None;
        let pv = vl.gv;
        drop(vl);
        self.version_cv.notify_all();
        Ok(pv)
    }

    /// Drops the version lock without granting (crashed acquirer).
    pub fn unlock_version(&self, txn: TxnId) -> bool {
        let mut vl = lock(&self.version_lock);
        if vl.holder == Some(txn) {
            vl.holder = None;
            drop(vl);
            self.version_cv.notify_all();
            true
        } else {
            false
        }
    }

    pub fn version_lock_holder(&self) -> Option<TxnId> {
        lock(&self.version_lock).holder
    }

    fn notify(&self) {
        self.counters_cv.notify_all();
        let observer = lock(&self.observer).as_ref().and_then(Weak::upgrade);
        if let Some(observer) = observer {
            observer.on_counter_change(&self.id);
        }
    }

    /// Makes the object available to the transaction with the next private
    /// version: `lv := pv`.
    pub fn release(&self, pv: Version) -> Result<(), VersionError> {
        {
            let mut c = lock(&self.counters);
            if !eval_access(pv, c.lv) {
                return Err(VersionError::OutOfOrderRelease {
                    object: self.id.clone(),
                    pv,
                    lv: c.lv,
                });
            }
            c.lv = pv;
        }
        self.notify();
        Ok(())
    }

    /// Records termination: `ltv := pv`, and `lv := pv` if the object was
    /// still held.
    pub fn finalize(&self, pv: Version) -> Result<(), VersionError> {
        {
            let mut c = lock(&self.counters);
            if !eval_termination(pv, c.ltv) {
                return Err(VersionError::OutOfOrderFinalize {
                    object: self.id.clone(),
                    pv,
                    ltv: c.ltv,
                });
            }
            c.ltv = pv;
            if c.lv < pv {
                c.lv = pv;
            }
            debug_assert!(c.ltv <= c.lv);
        }
        self.notify();
        Ok(())
    }

    /// Blocks until `condition` holds. `cancel` is re-checked on every wakeup;
    /// when it returns true the wait ends with [`VersionError::Cancelled`].
    pub fn await_condition(
        &self,
        condition: Condition,
        cancel: &dyn Fn() -> bool,
    ) -> Result<(), VersionError> {
        let mut c = lock(&self.counters);
        loop {
            if condition.holds(*c) {
                return Ok(());
            }
            if cancel() {
                return Err(VersionError::Cancelled);
            }
            c = self.counters_cv.wait(c).unwrap_or_else(|e| e.into_inner());
        }
    }

    pub fn await_uncancellable(&self, condition: Condition) {
        let _ = self.await_condition(condition, &|| false);
    }

    /// Wakes all waiters so they re-check their cancellation predicate.
    pub fn wake(&self) {
        let _guard = lock(&self.counters);
        self.counters_cv.notify_all();
    }
}

/// Private versions a transaction holds, keyed by object.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateVersionMap(pub BTreeMap<ObjectId, Version>);

impl PrivateVersionMap {
    pub fn get(&self, id: &ObjectId) -> Option<Version> {
        self.0.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Objects registered with one node's versioning layer.
#[derive(Default)]
pub struct VersionTable {
    objects: BTreeMap<ObjectId, Arc<VersionedObject>>,
}

impl VersionTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, object: Arc<VersionedObject>) {
        self.objects.insert(object.id().clone(), object);
    }

    pub fn get(&self, id: &ObjectId) -> Option<&Arc<VersionedObject>> {
        self.objects.get(id)
    }
}

/// Assigns `txn` one private version per declared object, atomically with
/// respect to other acquisitions. Version locks are taken in ascending
/// object-id order and all released before returning.
pub fn acquire_versions(
    table: &VersionTable,
    txn: TxnId,
    declared: &[ObjectId],
) -> Result<PrivateVersionMap, VersionError> {
    let mut ordered: Vec<&ObjectId> = declared.iter().collect();
    ordered.sort();
    for pair in ordered.windows(2) {
        if pair[0] == pair[1] {
            return Err(VersionError::Duplicate(pair[0].clone()));
        }
    }
    let objects = ordered
        .iter()
        .map(|id| {
            table
                .get(id)
                .cloned()
                .ok_or_else(|| VersionError::UnknownObject((*id).clone()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    for obj in &objects {
        obj.lock_version(txn);
    }
    let mut map = BTreeMap::new();
    for obj in &objects {
        let pv = obj.grant_version(txn)?;
        map.insert(obj.id().clone(), pv);
    }
    Ok(PrivateVersionMap(map))
}
