//! A home node: hosts shared objects and runs the server side of every
//! transaction that touches them.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, Weak};
use std::thread;
use std::time::Duration;

use crate::baselines::{lock_invoke, sva_invoke, ObjectLock};
use crate::engine::optsva::{self, is_doomed};
use crate::engine::{lock, Algorithm, HostedObject, LockMode, Proxy, ProxyState, RecoveryLog, RecoveryRecord, Sink, TxnShared};
use crate::executor::Executor;
use crate::history::{AbortCause, EventKind, Recorder};
use crate::ids::{NodeId, ObjectId, TxnId};
use crate::object::{restore, SharedObjectDef};
use crate::transport::{Declaration, Fault, ProxyHandle, Request, Response};
use crate::value::{Value, State};
use crate::versioning::{Condition, Counters, Suprema, VersionedObject};

#[derive(Clone, Debug)]
pub struct NodeConfig {
    /// Executor worker threads.
    pub workers: usize,
    /// A transaction silent for this long is rolled back. `None` disables
    /// the check.
    pub lease_timeout: Option<Duration>,
}

impl Default for NodeConfig {
    fn default() -> Self {
        NodeConfig {
            workers: 4,
            lease_timeout: Some(Duration::from_secs(5)),
        }
    }
}

pub struct Node {
    id: NodeId,
    config: NodeConfig,
    sink: Sink,
    objects: RwLock<BTreeMap<ObjectId, Arc<HostedObject>>>,
    executor: Executor,
    txns: Mutex<HashMap<TxnId, Arc<TxnShared>>>,
    rolled_back: Mutex<HashSet<TxnId>>,
    global_lock: ObjectLock,
    next_proxy: AtomicU64,
    stopped: AtomicBool,
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.id)
            .field("objects", &self.object_ids())
            .finish()
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        self.stopped.store(true, Ordering::SeqCst);
    }
}

impl Node {
    pub fn new(id: NodeId, config: NodeConfig, recorder: Option<Arc<Recorder>>) -> Arc<Node> {
        let node = Arc::new(Node {
            id,
            sink: Sink { node: id, recorder },
            executor: Executor::new(config.workers),
            config,
            objects: RwLock::new(BTreeMap::new()),
            txns: Mutex::new(HashMap::new()),
            rolled_back: Mutex::new(HashSet::new()),
            global_lock: ObjectLock::new(),
            next_proxy: AtomicU64::new(1),
            stopped: AtomicBool::new(false),
        });
        if let Some(timeout) = node.config.lease_timeout {
            spawn_reaper(Arc::downgrade(&node), timeout);
        }
        node
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn recorder(&self) -> Option<&Arc<Recorder>> {
        self.sink.recorder.as_ref()
    }

    /// Hosts a new object here.
    pub fn register(&self, id: impl Into<ObjectId>, def: SharedObjectDef, state: State) -> Result<(), Fault> {
        let id = id.into();
        let mut objects = self.objects.write().unwrap_or_else(|e| e.into_inner());
        if objects.contains_key(&id) {
            return Err(Fault::DuplicateObject(id));
        }
        if let Some(r) = &self.sink.recorder {
            r.record(
                Some(self.id),
                None,
                EventKind::Init {
                    object: id.clone(),
                    type_name: def.type_name().to_string(),
                    state: state.clone(),
                },
            );
        }
        let version = Arc::new(VersionedObject::new(id.clone()));
        self.executor.watch(&version);
        objects.insert(
            id.clone(),
            Arc::new(HostedObject {
                id,
                def,
                state: Mutex::new(state),
                version,
                recovery: Mutex::new(RecoveryLog::default()),
                lock: ObjectLock::new(),
            }),
        );
        Ok(())
    }

    fn object(&self, id: &ObjectId) -> Result<Arc<HostedObject>, Fault> {
        self.objects
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| Fault::UnknownObject(id.clone()))
    }

    pub fn object_ids(&self) -> Vec<ObjectId> {
        self.objects.read().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect()
    }

    /// Current state of a hosted object.
    pub fn state_of(&self, id: &ObjectId) -> Option<State> {
        self.object(id).ok().map(|o| lock(&o.state).clone())
    }

    /// `(gv, lv/ltv)` of a hosted object.
    pub fn counters_of(&self, id: &ObjectId) -> Option<(u64, Counters)> {
        self.object(id).ok().map(|o| (o.version.gv(), o.version.counters()))
    }

    /// Records the current state of every hosted object as final.
    pub fn record_final_states(&self) {
        let Some(r) = &self.sink.recorder else { return };
        for id in self.object_ids() {
            if let Some(state) = self.state_of(&id) {
                r.record(Some(self.id), None, EventKind::Final { object: id, state });
            }
        }
    }

    /// Transactions with live server-side state here.
    pub fn active_transactions(&self) -> Vec<TxnId> {
        let mut v: Vec<TxnId> = lock(&self.txns).keys().copied().collect();
        v.sort();
        v
    }

    pub fn handle(&self, request: Request) -> Result<Response, Fault> {
        match request {
            Request::Locate { object } => {
                let obj = self.object(&object)?;
                Ok(Response::Located {
                    node: self.id,
                    interface: obj.def.interface(),
                })
            }
            Request::Heartbeat { txns } => {
                let table = lock(&self.txns);
                for t in txns {
                    if let Some(ts) = table.get(&t) {
                        ts.touch();
                    }
                }
                Ok(Response::Ack)
            }
            Request::Acquire {
                txn,
                algorithm,
                objects,
                global,
            } => {
                let ts = self.txn(txn, true)?;
                let _busy = lock(&ts.busy);
                self.check_live(&ts)?;
                self.acquire(&ts, algorithm, &objects, global)
            }
            Request::OpenProxy {
                txn,
                algorithm,
                irrevocable,
                declarations,
            } => {
                let ts = self.txn(txn, true)?;
                let _busy = lock(&ts.busy);
                self.check_live(&ts)?;
                self.open_proxies(&ts, algorithm, irrevocable, &declarations)
            }
            Request::Invoke {
                txn,
                object,
                method,
                args,
            } => {
                let ts = self.txn(txn, false)?;
                let _busy = lock(&ts.busy);
                self.check_live(&ts)?;
                self.invoke(&ts, &object, &method, &args).map(Response::Value)
            }
            Request::Prepare { txn } => {
                let ts = self.txn(txn, false)?;
                let _busy = lock(&ts.busy);
                self.check_live(&ts)?;
                Ok(Response::Prepared {
                    doomed: self.prepare(&ts),
                })
            }
            Request::Finalize { txn, commit } => {
                if lock(&self.rolled_back).contains(&txn) {
                    return if commit {
                        Err(Fault::RolledBack(txn))
                    } else {
                        Ok(Response::Finalized)
                    };
                }
                let Some(ts) = lock(&self.txns).get(&txn).cloned() else {
                    return Ok(Response::Finalized);
                };
                let _busy = lock(&ts.busy);
                self.check_live(&ts)?;
                if commit && is_doomed(&ts) {
                    return Err(Fault::Doomed(txn));
                }
                self.terminate(&ts, commit);
                Ok(Response::Finalized)
            }
        }
    }

    fn txn(&self, txn: TxnId, create: bool) -> Result<Arc<TxnShared>, Fault> {
        if lock(&self.rolled_back).contains(&txn) {
            return Err(Fault::RolledBack(txn));
        }
        let mut table = lock(&self.txns);
        let ts = match table.get(&txn) {
            Some(ts) => Arc::clone(ts),
            None if create => Arc::clone(table.entry(txn).or_insert_with(|| Arc::new(TxnShared::new(txn)))),
            None => return Err(Fault::Protocol(format!("{txn} has no state on {}", self.id))),
        };
        ts.touch();
        Ok(ts)
    }

    fn check_live(&self, ts: &TxnShared) -> Result<(), Fault> {
        if ts.is_rolled_back() {
            Err(Fault::RolledBack(ts.id))
        } else if ts.terminated.load(Ordering::SeqCst) {
            Err(Fault::Protocol(format!("{} already terminated", ts.id)))
        } else {
            Ok(())
        }
    }

    fn acquire(
        &self,
        ts: &TxnShared,
        algorithm: Algorithm,
        objects: &[(ObjectId, LockMode)],
        global: bool,
    ) -> Result<Response, Fault> {
        let hosted = objects
            .iter()
            .map(|(id, mode)| Ok((self.object(id)?, *mode)))
            .collect::<Result<Vec<_>, Fault>>()?;
        if global {
            self.global_lock.lock(ts.id, LockMode::Exclusive);
            ts.global_lock.store(true, Ordering::SeqCst);
        }
        for (obj, mode) in hosted {
            if algorithm.is_versioned() {
                obj.version.lock_version(ts.id);
                lock(&ts.version_locks).push(obj.id.clone());
            } else if algorithm.uses_object_locks() {
                obj.lock.lock(ts.id, mode);
                self.sink.record(ts.id, EventKind::Lock { object: obj.id.clone() });
                lock(&ts.object_locks).insert(obj.id.clone(), mode);
            }
        }
        Ok(Response::Acquired)
    }

    fn open_proxies(
        &self,
        ts: &Arc<TxnShared>,
        algorithm: Algorithm,
        irrevocable: bool,
        declarations: &[Declaration],
    ) -> Result<Response, Fault> {
        let mut handles = Vec::new();
        let mut fresh = Vec::new();
        let mut sorted: Vec<&Declaration> = declarations.iter().collect();
        sorted.sort_by(|a, b| a.object.cmp(&b.object));
        for decl in sorted {
            let obj = self.object(&decl.object)?;
            if let Some(existing) = ts.proxy(&decl.object) {
                handles.push(ProxyHandle {
                    proxy_id: existing.id,
                    txn: ts.id,
                    object: decl.object.clone(),
                    pv: lock(&existing.state).pv,
                });
                continue;
            }
            let pv = if algorithm.is_versioned() {
                let pv = obj
                    .version
                    .grant_version(ts.id)
                    .map_err(|e| Fault::Protocol(e.to_string()))?;
                lock(&ts.version_locks).retain(|id| id != &obj.id);
                self.sink.record(
                    ts.id,
                    EventKind::Acquire {
                        object: obj.id.clone(),
                        pv,
                    },
                );
                Some(pv)
            } else {
                None
            };
            let suprema: Suprema = decl.suprema;
            let mut state = ProxyState::new(obj.id.clone(), pv, suprema, irrevocable, algorithm);
            state.lock_held = lock(&ts.object_locks).get(&obj.id).copied();
            let proxy = Arc::new(Proxy {
                id: self.next_proxy.fetch_add(1, Ordering::Relaxed),
                object: obj,
                state: Mutex::new(state),
            });
            handles.push(ProxyHandle {
                proxy_id: proxy.id,
                txn: ts.id,
                object: decl.object.clone(),
                pv,
            });
            lock(&ts.proxies).insert(decl.object.clone(), Arc::clone(&proxy));
            fresh.push(proxy);
        }
        if algorithm == Algorithm::OptsvaCf {
            for proxy in fresh {
                let mut p = lock(&proxy.state);
                if p.read_only {
                    optsva::submit_prefetch(&self.sink, &self.executor, ts, &proxy, &mut p);
                }
            }
        }
        Ok(Response::Opened { proxies: handles })
    }

    fn invoke(&self, ts: &Arc<TxnShared>, object: &ObjectId, method: &str, args: &Value) -> Result<Value, Fault> {
        let proxy = ts.proxy(object).ok_or_else(|| Fault::NoProxy {
            txn: ts.id,
            object: object.clone(),
        })?;
        if ts.doomed.load(Ordering::SeqCst) {
            return Err(Fault::Doomed(ts.id));
        }
        let algorithm = lock(&proxy.state).algorithm;
        match algorithm {
            Algorithm::OptsvaCf => optsva::invoke(&self.sink, &self.executor, ts, &proxy, method, args),
            Algorithm::Sva => sva_invoke(&self.sink, ts, &proxy, method, args),
            _ => lock_invoke(&self.sink, ts, &proxy, method, args),
        }
    }

    /// Returns whether the transaction is doomed once every object here
    /// satisfies its commit condition.
    fn prepare(&self, ts: &Arc<TxnShared>) -> bool {
        for proxy in ts.proxies() {
            let versioned = lock(&proxy.state).algorithm == Algorithm::OptsvaCf;
            if versioned && optsva::prepare_object(&self.sink, ts, &proxy).is_err() {
                ts.doomed.store(true, Ordering::SeqCst);
            }
            if !versioned {
                let mut p = lock(&proxy.state);
                if let (Err(_), true) = (p.join_pending(), p.pv.is_some()) {
                    ts.doomed.store(true, Ordering::SeqCst);
                }
                if let Some(pv) = p.pv {
                    proxy.object.version.await_uncancellable(Condition::Termination(pv));
                }
            }
        }
        is_doomed(ts)
    }

    /// Commits or rolls back every object of the transaction here and drops
    /// its server-side state.
    fn terminate(&self, ts: &Arc<TxnShared>, commit: bool) {
        let mut invalidated = false;
        for proxy in ts.proxies() {
            let obj = &proxy.object;
            let mut p = lock(&proxy.state);
            let _ = p.join_pending();
            match p.pv {
                Some(pv) => {
                    obj.version.await_uncancellable(Condition::Termination(pv));
                    if !commit {
                        invalidated |= self.roll_back_versioned(ts, obj, &mut p, pv);
                    }
                    p.log = crate::object::LogBuffer::new(obj.id.clone());
                    if obj.version.counters().lv < pv {
                        self.sink.record(
                            ts.id,
                            EventKind::Release {
                                object: obj.id.clone(),
                                pv,
                            },
                        );
                    }
                    obj.version
                        .finalize(pv)
                        .expect("termination condition was awaited");
                    let ltv = obj.version.counters().ltv;
                    lock(&obj.recovery).records.retain(|r| r.horizon > ltv);
                }
                None => {
                    // Objects unlocked early by two-phase variants were
                    // already exposed and are left as they are.
                    if !commit && p.modified && !p.released {
                        if let Some(stored) = p.stored.as_ref() {
                            let mut state = lock(&obj.state);
                            restore(&obj.id, &mut state, stored).expect("buffer belongs to this object");
                        }
                    }
                }
            }
            drop(p);
        }
        for id in lock(&ts.version_locks).drain(..) {
            if let Ok(obj) = self.object(&id) {
                obj.version.unlock_version(ts.id);
            }
        }
        let locked: Vec<ObjectId> = lock(&ts.object_locks).keys().cloned().collect();
        for id in locked {
            if let Ok(obj) = self.object(&id) {
                if obj.lock.unlock(ts.id).is_ok() {
                    self.sink.record(ts.id, EventKind::Unlock { object: id });
                }
            }
        }
        if ts.global_lock.swap(false, Ordering::SeqCst) {
            let _ = self.global_lock.unlock(ts.id);
        }
        ts.terminated.store(true, Ordering::SeqCst);
        lock(&self.txns).remove(&ts.id);
        if invalidated {
            self.wake_all();
        }
    }

    /// Restores an object the aborting transaction modified, unless an
    /// earlier abort already restored it to an older state that this
    /// transaction's copy was derived from. Returns whether the object is
    /// now marked invalid for transactions that consumed it early.
    fn roll_back_versioned(&self, ts: &TxnShared, obj: &Arc<HostedObject>, p: &mut ProxyState, pv: u64) -> bool {
        if !p.modified {
            return false;
        }
        let consumed = lock(&ts.consumptions).get(&obj.id).map(|(_, c)| *c);
        let horizon = obj.version.gv();
        let mut state = lock(&obj.state);
        let mut rec = lock(&obj.recovery);
        let derived_from_aborted = consumed
            .is_some_and(|c| rec.records.iter().any(|r| r.aborter_pv < pv && c.epoch < r.epoch));
        if derived_from_aborted {
            return false;
        }
        let Some(stored) = p.stored.as_ref() else {
            return false;
        };
        restore(&obj.id, &mut state, stored).expect("buffer belongs to this object");
        rec.epoch += 1;
        let epoch = rec.epoch;
        rec.records.push(RecoveryRecord {
            aborter_pv: pv,
            epoch,
            invalidated: p.released,
            horizon,
        });
        p.released
    }

    fn wake_all(&self) {
        let objects: Vec<Arc<HostedObject>> = self
            .objects
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .values()
            .cloned()
            .collect();
        for o in objects {
            o.version.wake();
        }
    }

    /// Rolls back a transaction whose client stopped sending heartbeats.
    pub fn self_rollback(&self, txn: TxnId) {
        let Some(ts) = lock(&self.txns).get(&txn).cloned() else {
            return;
        };
        ts.rolled_back.store(true, Ordering::SeqCst);
        lock(&self.rolled_back).insert(txn);
        self.wake_all();
        let _busy = lock(&ts.busy);
        if ts.terminated.load(Ordering::SeqCst) {
            return;
        }
        self.terminate(&ts, false);
        self.sink.record(
            txn,
            EventKind::Abort {
                cause: AbortCause::Forced,
            },
        );
    }
}

fn spawn_reaper(node: Weak<Node>, timeout: Duration) {
    let tick = (timeout / 5).clamp(Duration::from_millis(10), Duration::from_millis(200));
    thread::Builder::new()
        .name("lease-reaper".into())
        .spawn(move || loop {
            thread::sleep(tick);
            let Some(node) = node.upgrade() else { return };
            if node.stopped.load(Ordering::SeqCst) {
                return;
            }
            let expired: Vec<TxnId> = lock(&node.txns)
                .values()
                .filter(|ts| lock(&ts.lease).elapsed() > timeout)
                .map(|ts| ts.id)
                .collect();
            for txn in expired {
                let node = Arc::clone(&node);
                thread::spawn(move || node.self_rollback(txn));
            }
        })
        .expect("spawn lease reaper");
}
