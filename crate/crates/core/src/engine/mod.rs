//! Per-transaction state kept at an object's home node, and the dispatch of
//! operations to the concurrency control selected for the transaction.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::executor::TaskHandle;
use crate::history::{EventKind, Recorder};
use crate::ids::{NodeId, ObjectId, TxnId, Version};
use crate::object::{CopyBuffer, LogBuffer, OperationClass, SharedObjectDef};
use crate::value::State;
use crate::versioning::{Suprema, VersionedObject};

pub mod optsva;

pub use crate::baselines::ObjectLock;

pub(crate) fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Where a node's events go.
#[derive(Clone, Debug)]
pub(crate) struct Sink {
    pub node: NodeId,
    pub recorder: Option<Arc<Recorder>>,
}

impl Sink {
    pub fn record(&self, txn: TxnId, kind: EventKind) {
        if let Some(r) = &self.recorder {
            r.record(Some(self.node), Some(txn), kind);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    OptsvaCf,
    Sva,
    MutexS2pl,
    Mutex2pl,
    RwS2pl,
    Rw2pl,
    Glock,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Algorithm::OptsvaCf,
        Algorithm::Sva,
        Algorithm::MutexS2pl,
        Algorithm::Mutex2pl,
        Algorithm::RwS2pl,
        Algorithm::Rw2pl,
        Algorithm::Glock,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::OptsvaCf => "optsva-cf",
            Algorithm::Sva => "sva",
            Algorithm::MutexS2pl => "mutex-s2pl",
            Algorithm::Mutex2pl => "mutex-2pl",
            Algorithm::RwS2pl => "rw-s2pl",
            Algorithm::Rw2pl => "rw-2pl",
            Algorithm::Glock => "glock",
        }
    }

    /// Algorithms built on private versions.
    pub fn is_versioned(self) -> bool {
        matches!(self, Algorithm::OptsvaCf | Algorithm::Sva)
    }

    pub fn uses_object_locks(self) -> bool {
        matches!(
            self,
            Algorithm::MutexS2pl | Algorithm::Mutex2pl | Algorithm::RwS2pl | Algorithm::Rw2pl
        )
    }

    /// Two-phase variants unlock an object once its suprema are used up.
    pub fn unlocks_early(self) -> bool {
        matches!(self, Algorithm::Mutex2pl | Algorithm::Rw2pl)
    }

    pub fn shares_reads(self) -> bool {
        matches!(self, Algorithm::RwS2pl | Algorithm::Rw2pl)
    }

    /// Whether a manual abort can be undone safely. Two-phase variants may
    /// have exposed state after unlocking early and cannot roll it back.
    pub fn supports_manual_abort(self) -> bool {
        !self.unlocks_early()
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown algorithm `{0}` (expected one of optsva-cf, sva, mutex-s2pl, mutex-2pl, rw-s2pl, rw-2pl, glock)")]
pub struct UnknownAlgorithm(pub String);

impl FromStr for Algorithm {
    type Err = UnknownAlgorithm;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == norm || (norm == "optsva" && *a == Algorithm::OptsvaCf))
            .ok_or_else(|| UnknownAlgorithm(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LockMode {
    Shared,
    Exclusive,
}

/// One abort's effect on an object, kept until every transaction that could
/// have consumed the object before it has terminated.
#[derive(Clone, Debug, PartialEq, Eq)]
pub(crate) struct RecoveryRecord {
    pub aborter_pv: Version,
    pub epoch: u64,
    /// The aborter had modified and released the object early, so state it
    /// exposed is now invalid.
    pub invalidated: bool,
    /// Highest private version granted when the record was made.
    pub horizon: Version,
}

#[derive(Debug, Default)]
pub(crate) struct RecoveryLog {
    pub epoch: u64,
    pub records: Vec<RecoveryRecord>,
}

/// A shared object on its home node.
pub(crate) struct HostedObject {
    pub id: ObjectId,
    pub def: SharedObjectDef,
    pub state: Mutex<State>,
    pub version: Arc<VersionedObject>,
    pub recovery: Mutex<RecoveryLog>,
    pub lock: ObjectLock,
}

/// What a transaction saw of an object when it first consumed its state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Consumption {
    pub pv: Version,
    pub dependency_lv: Version,
    pub epoch: u64,
}

/// Results an asynchronous task hands back to its proxy.
#[derive(Debug, Default)]
pub(crate) struct TaskOutput {
    pub stored: Option<CopyBuffer>,
    pub buf: Option<CopyBuffer>,
    pub modified: bool,
}

/// Per-(transaction, object) concurrency-control state.
#[derive(Debug)]
pub(crate) struct ProxyState {
    pub pv: Option<Version>,
    pub suprema: Suprema,
    pub irrevocable: bool,
    pub algorithm: Algorithm,
    pub reads: u64,
    pub writes: u64,
    pub updates: u64,
    /// The transaction has passed the access condition (or taken the lock)
    /// and touched the live object.
    pub accessed: bool,
    /// The object was released (or unlocked) before termination, or an
    /// asynchronous task will release it.
    pub released: bool,
    pub modified: bool,
    pub read_only: bool,
    pub buf: Option<CopyBuffer>,
    pub stored: Option<CopyBuffer>,
    pub log: LogBuffer,
    pub pending: Option<(TaskHandle, Arc<Mutex<TaskOutput>>)>,
    pub lock_held: Option<LockMode>,
}

impl ProxyState {
    pub fn new(object: ObjectId, pv: Option<Version>, suprema: Suprema, irrevocable: bool, algorithm: Algorithm) -> Self {
        ProxyState {
            pv,
            suprema,
            irrevocable,
            algorithm,
            reads: 0,
            writes: 0,
            updates: 0,
            accessed: false,
            released: false,
            modified: false,
            read_only: suprema.is_read_only(),
            buf: None,
            stored: None,
            log: LogBuffer::new(object),
            pending: None,
            lock_held: None,
        }
    }

    pub fn cc(&self) -> u64 {
        self.reads + self.writes + self.updates
    }

    pub fn wc(&self) -> u64 {
        self.writes + self.updates
    }

    /// Whether one more operation of `class` stays within the declared
    /// bounds. The versioning baseline only knows the total bound.
    pub fn admits(&self, class: OperationClass) -> bool {
        if self.suprema.ub().reached_by(self.cc()) {
            return false;
        }
        if self.algorithm == Algorithm::Sva {
            return true;
        }
        match class {
            OperationClass::Read => !self.suprema.max_reads.reached_by(self.reads),
            OperationClass::Write => {
                !self.suprema.max_writes.reached_by(self.writes) && !self.suprema.wub().reached_by(self.wc())
            }
            OperationClass::Update => {
                !self.suprema.max_updates.reached_by(self.updates)
                    && !self.suprema.wub().reached_by(self.wc())
            }
        }
    }

    pub fn count(&mut self, class: OperationClass) {
        match class {
            OperationClass::Read => self.reads += 1,
            OperationClass::Write => self.writes += 1,
            OperationClass::Update => self.updates += 1,
        }
    }

    /// Waits for an outstanding asynchronous task and takes over its
    /// buffers. A failed task leaves the transaction unable to commit.
    pub fn join_pending(&mut self) -> Result<(), String> {
        let Some((handle, output)) = self.pending.take() else {
            return Ok(());
        };
        let outcome = handle.join();
        let mut out = lock(&output);
        if let Some(stored) = out.stored.take() {
            self.stored = Some(stored);
        }
        if let Some(buf) = out.buf.take() {
            self.buf = Some(buf);
        }
        if out.modified {
            self.modified = true;
        }
        outcome.map_err(|e| e.to_string())
    }
}

pub(crate) struct Proxy {
    pub id: u64,
    pub object: Arc<HostedObject>,
    pub state: Mutex<ProxyState>,
}

/// Node-local view of one transaction.
pub(crate) struct TxnShared {
    pub id: TxnId,
    pub proxies: Mutex<BTreeMap<ObjectId, Arc<Proxy>>>,
    pub consumptions: Mutex<BTreeMap<ObjectId, (Arc<HostedObject>, Consumption)>>,
    /// Version locks taken by `Acquire` and not yet turned into grants.
    pub version_locks: Mutex<Vec<ObjectId>>,
    /// Object locks taken by `Acquire`.
    pub object_locks: Mutex<BTreeMap<ObjectId, LockMode>>,
    pub global_lock: AtomicBool,
    pub doomed: AtomicBool,
    pub rolled_back: AtomicBool,
    pub terminated: AtomicBool,
    pub lease: Mutex<Instant>,
    /// Serializes the requests of one transaction on this node.
    pub busy: Mutex<()>,
}

impl TxnShared {
    pub fn new(id: TxnId) -> Self {
        TxnShared {
            id,
            proxies: Mutex::new(BTreeMap::new()),
            consumptions: Mutex::new(BTreeMap::new()),
            version_locks: Mutex::new(Vec::new()),
            object_locks: Mutex::new(BTreeMap::new()),
            global_lock: AtomicBool::new(false),
            doomed: AtomicBool::new(false),
            rolled_back: AtomicBool::new(false),
            terminated: AtomicBool::new(false),
            lease: Mutex::new(Instant::now()),
            busy: Mutex::new(()),
        }
    }

    pub fn touch(&self) {
        *lock(&self.lease) = Instant::now();
    }

    pub fn is_rolled_back(&self) -> bool {
        self.rolled_back.load(Ordering::SeqCst)
    }

    pub fn proxy(&self, object: &ObjectId) -> Option<Arc<Proxy>> {
        lock(&self.proxies).get(object).cloned()
    }

    pub fn proxies(&self) -> Vec<Arc<Proxy>> {
        lock(&self.proxies).values().cloned().collect()
    }
}
