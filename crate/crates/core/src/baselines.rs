//! Reference concurrency controls: the operation-agnostic versioning
//! algorithm, mutex and reader-writer locking in strict and non-strict
//! two-phase styles, and a single global lock.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::{Arc, Condvar, Mutex};

use crate::engine::optsva::{await_access, consume, is_doomed, method_fault, release_object};
use crate::engine::{lock, LockMode, Proxy, Sink, TxnShared};
use crate::history::EventKind;
use crate::ids::TxnId;
use crate::object::{checkpoint, OperationClass};
use crate::transport::Fault;
use crate::value::Value;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LockError {
    #[error("{0} does not hold the lock")]
    NotHeld(TxnId),
}

#[derive(Debug, Default)]
struct Holders {
    exclusive: Option<TxnId>,
    shared: BTreeSet<TxnId>,
}

/// A blocking reader-writer lock owned by transactions.
#[derive(Default)]
pub struct ObjectLock {
    holders: Mutex<Holders>,
    changed: Condvar,
}

impl fmt::Debug for ObjectLock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ObjectLock").field("holders", &*lock(&self.holders)).finish()
    }
}

impl ObjectLock {
    pub fn new() -> Self {
        Self::default()
    }

    /// Blocks until `txn` holds the lock in `mode`. Re-entrant.
    pub fn lock(&self, txn: TxnId, mode: LockMode) {
        let mut h = lock(&self.holders);
        loop {
            let free = match mode {
                LockMode::Shared => h.exclusive.is_none() || h.exclusive == Some(txn),
                LockMode::Exclusive => {
                    (h.exclusive.is_none() || h.exclusive == Some(txn))
                        && h.shared.iter().all(|t| *t == txn)
                }
            };
            if free {
                break;
            }
            h = self.changed.wait(h).unwrap_or_else(|e| e.into_inner());
        }
        match mode {
            LockMode::Shared => {
                h.shared.insert(txn);
            }
            LockMode::Exclusive => {
                h.shared.remove(&txn);
                h.exclusive = Some(txn);
            }
        }
    }

    pub fn unlock(&self, txn: TxnId) -> Result<(), LockError> {
        let mut h = lock(&self.holders);
        let held = h.shared.remove(&txn) | (h.exclusive == Some(txn));
        if h.exclusive == Some(txn) {
            h.exclusive = None;
        }
        drop(h);
        if held {
            self.changed.notify_all();
            Ok(())
        } else {
            Err(LockError::NotHeld(txn))
        }
    }

    pub fn holds(&self, txn: TxnId) -> bool {
        let h = lock(&self.holders);
        h.exclusive == Some(txn) || h.shared.contains(&txn)
    }
}

/// Operation-agnostic versioning: every operation waits for access and
/// runs on the live object; the object is released once the total bound
/// is used up.
pub(crate) fn sva_invoke(
    sink: &Sink,
    ts: &Arc<TxnShared>,
    proxy: &Proxy,
    method: &str,
    args: &Value,
) -> Result<Value, Fault> {
    let obj = &proxy.object;
    let class = obj.def.method(method).map_err(method_fault)?.class;
    let mut p = lock(&proxy.state);
    if !p.admits(class) || p.released {
        return Err(Fault::SupremumExceeded {
            txn: ts.id,
            object: obj.id.clone(),
        });
    }
    let pv = p.pv.expect("versioned proxy has a private version");
    if !p.accessed {
        await_access(ts, obj, pv, p.irrevocable)?;
        let state = lock(&obj.state);
        consume(sink, ts, obj, pv);
        p.stored = Some(checkpoint(&obj.id, &state, pv).map_err(method_fault)?);
        p.accessed = true;
    }
    if is_doomed(ts) {
        return Err(Fault::Doomed(ts.id));
    }
    let out = {
        let mut state = lock(&obj.state);
        obj.def.invoke(&mut state, method, args)
    };
    if class != OperationClass::Read {
        p.modified = true;
    }
    let out = out.map_err(method_fault)?;
    p.count(class);
    if p.suprema.ub().reached_by(p.cc()) {
        release_object(sink, ts.id, obj, pv)?;
        p.released = true;
    }
    Ok(out)
}

/// Lock-based baselines: locks were taken at begin, so every operation runs
/// directly. Two-phase variants unlock once the object's bounds are used up.
pub(crate) fn lock_invoke(
    sink: &Sink,
    ts: &Arc<TxnShared>,
    proxy: &Proxy,
    method: &str,
    args: &Value,
) -> Result<Value, Fault> {
    let obj = &proxy.object;
    let class = obj.def.method(method).map_err(method_fault)?.class;
    let mut p = lock(&proxy.state);
    if !p.admits(class) {
        return Err(Fault::SupremumExceeded {
            txn: ts.id,
            object: obj.id.clone(),
        });
    }
    if p.released {
        return Err(Fault::Protocol(format!("`{}` was already unlocked by {}", obj.id, ts.id)));
    }
    if p.lock_held == Some(LockMode::Shared) && class != OperationClass::Read {
        return Err(Fault::Protocol(format!(
            "{} holds a shared lock on `{}` and cannot modify it",
            ts.id, obj.id
        )));
    }
    let out = {
        let mut state = lock(&obj.state);
        if !p.accessed {
            p.stored = Some(checkpoint(&obj.id, &state, 0).map_err(method_fault)?);
            p.accessed = true;
        }
        obj.def.invoke(&mut state, method, args)
    };
    if class != OperationClass::Read {
        p.modified = true;
    }
    let out = out.map_err(method_fault)?;
    p.count(class);
    if p.algorithm.unlocks_early() && p.lock_held.is_some() && p.suprema.ub().reached_by(p.cc()) {
        unlock_early(sink, ts.id, proxy, &mut p)?;
    }
    Ok(out)
}

fn unlock_early(
    sink: &Sink,
    txn: TxnId,
    proxy: &Proxy,
    p: &mut crate::engine::ProxyState,
) -> Result<(), Fault> {
    sink.record(
        txn,
        EventKind::Unlock {
            object: proxy.object.id.clone(),
        },
    );
    proxy
        .object
        .lock
        .unlock(txn)
        .map_err(|e| Fault::Protocol(e.to_string()))?;
    p.lock_held = None;
    p.released = true;
    Ok(())
}
