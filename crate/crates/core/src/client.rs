//! Client side: object lookup, transaction preambles and the commit
//! protocol.
//!
//! ```no_run
//! # use std::sync::Arc;
//! # use optsva::client::{Client, ClientConfig, Outcome};
//! # use optsva::value::Value;
//! # fn demo(client: Client) -> Result<(), Box<dyn std::error::Error>> {
//! let mut t = client.transaction();
//! let a = t.accesses("A", Some(1), Some(0), Some(1))?;
//! let b = t.updates("B", Some(1))?;
//! let report = t.start(|tx| {
//!     tx.invoke(&a, "withdraw", 100)?;
//!     tx.invoke(&b, "deposit", 100)?;
//!     if tx.invoke(&a, "balance", ())?.as_int() < Some(0) {
//!         return tx.abort();
//!     }
//!     Ok(())
//! })?;
//! assert!(matches!(report.outcome, Outcome::Committed(())));
//! # Ok(()) }
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};
use std::thread;
use std::time::Duration;

use crate::engine::{lock, Algorithm, LockMode};
use crate::history::{AbortCause, EventKind, Recorder};
use crate::ids::{NodeId, ObjectId, TxnId};
use crate::object::{Interface, OperationClass};
use crate::transport::{CallError, Declaration, Fault, Request, Response, Transport};
use crate::value::Value;
use crate::versioning::{Bound, Suprema};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Attempts allowed per `start`, including the first. Zero fails
    /// without running the body.
    pub max_attempts: u32,
    /// Rerun automatically after a forced abort.
    pub retry_forced: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 16,
            retry_forced: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ClientConfig {
    /// Embedded in every transaction id; must be unique per client.
    pub id: u32,
    pub algorithm: Algorithm,
    /// Interval between lease heartbeats. `None` sends none.
    pub heartbeat: Option<Duration>,
    pub retry: RetryPolicy,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            id: 1,
            algorithm: Algorithm::OptsvaCf,
            heartbeat: Some(Duration::from_secs(1)),
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Call(#[from] CallError),
    #[error("object `{0}` is not hosted by any node")]
    NotFound(ObjectId),
    #[error("gave up after {0} attempts")]
    AttemptsExhausted(u32),
    #[error("`{method}` is not a method of `{object}`")]
    NoSuchMethod { object: ObjectId, method: String },
    #[error("`{0}` was not declared by this transaction")]
    Undeclared(ObjectId),
    #[error("transaction already finished")]
    Finished,
}

/// Why a transaction body stopped early.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TxnError {
    #[error("aborted by the program")]
    Abort,
    #[error("retry requested by the program")]
    Retry,
    #[error("forcibly aborted: {0}")]
    Forced(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

impl From<CallError> for TxnError {
    fn from(e: CallError) -> Self {
        TxnError::Client(ClientError::Call(e))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Outcome<T> {
    Committed(T),
    Aborted(AbortCause),
}

impl<T> Outcome<T> {
    pub fn is_committed(&self) -> bool {
        matches!(self, Outcome::Committed(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TxnReport<T> {
    pub outcome: Outcome<T>,
    /// Id of the last attempt.
    pub txn: TxnId,
    pub attempts: u32,
    pub manual_aborts: u32,
    pub forced_aborts: u32,
}

/// Client-side reference to a declared object.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stub {
    pub object: ObjectId,
    pub node: NodeId,
    interface: Arc<Interface>,
}

impl Stub {
    pub fn class_of(&self, method: &str) -> Option<OperationClass> {
        self.interface.class_of(method)
    }

    pub fn interface(&self) -> &Interface {
        &self.interface
    }
}

#[derive(Default)]
struct Liveness {
    /// Running transactions and the nodes holding their state.
    active: Mutex<BTreeMap<TxnId, BTreeSet<NodeId>>>,
    paused: AtomicBool,
}

pub struct Client {
    config: ClientConfig,
    transport: Arc<dyn Transport>,
    recorder: Option<Arc<Recorder>>,
    locations: Mutex<HashMap<ObjectId, (NodeId, Arc<Interface>)>>,
    next_seq: AtomicU64,
    liveness: Arc<Liveness>,
}

impl Client {
    pub fn new(transport: Arc<dyn Transport>, config: ClientConfig) -> Client {
        let liveness = Arc::new(Liveness::default());
        if let Some(every) = config.heartbeat {
            spawn_heartbeat(Arc::downgrade(&liveness), Arc::clone(&transport), every);
        }
        Client {
            config,
            transport,
            recorder: None,
            locations: Mutex::new(HashMap::new()),
            next_seq: AtomicU64::new(1),
            liveness,
        }
    }

    pub fn with_recorder(mut self, recorder: Arc<Recorder>) -> Self {
        self.recorder = Some(recorder);
        self
    }

    pub fn id(&self) -> u32 {
        self.config.id
    }

    pub fn algorithm(&self) -> Algorithm {
        self.config.algorithm
    }

    pub fn transport(&self) -> &Arc<dyn Transport> {
        &self.transport
    }

    /// Stops or resumes heartbeats, simulating a client that hangs.
    pub fn pause_heartbeats(&self, paused: bool) {
        self.liveness.paused.store(paused, Ordering::SeqCst);
    }

    fn record(&self, txn: TxnId, kind: EventKind) {
        if let Some(r) = &self.recorder {
            r.record(None, Some(txn), kind);
        }
    }

    /// Finds the home node of an object.
    pub fn locate(&self, object: impl Into<ObjectId>) -> Result<Stub, ClientError> {
        let object = object.into();
        if let Some((node, interface)) = lock(&self.locations).get(&object) {
            return Ok(Stub {
                object,
                node: *node,
                interface: Arc::clone(interface),
            });
        }
        for node in self.transport.nodes() {
            match self.transport.call(node, Request::Locate { object: object.clone() }) {
                Ok(Response::Located { node, interface }) => {
                    let interface = Arc::new(interface);
                    lock(&self.locations).insert(object.clone(), (node, Arc::clone(&interface)));
                    return Ok(Stub {
                        object,
                        node,
                        interface,
                    });
                }
                Ok(other) => {
                    return Err(CallError::Transport(format!("unexpected reply to locate: {other:?}")).into())
                }
                Err(CallError::Fault(Fault::UnknownObject(_))) => continue,
                Err(e) => return Err(e.into()),
            }
        }
        Err(ClientError::NotFound(object))
    }

    /// A new transaction preamble using the client's algorithm.
    pub fn transaction(&self) -> Transaction<'_> {
        Transaction {
            client: self,
            algorithm: self.config.algorithm,
            irrevocable: false,
            retry: self.config.retry,
            declared: BTreeMap::new(),
        }
    }
}

/// A transaction preamble: declared objects with their suprema.
pub struct Transaction<'c> {
    client: &'c Client,
    algorithm: Algorithm,
    irrevocable: bool,
    retry: RetryPolicy,
    declared: BTreeMap<ObjectId, (Stub, Suprema)>,
}

impl<'c> Transaction<'c> {
    /// An irrevocable transaction never sees early-released state and is
    /// never forced to abort.
    pub fn irrevocable(mut self, yes: bool) -> Self {
        self.irrevocable = yes;
        self
    }

    pub fn algorithm(mut self, algorithm: Algorithm) -> Self {
        self.algorithm = algorithm;
        self
    }

    pub fn retry_policy(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn declare(&mut self, object: ObjectId, apply: impl FnOnce(&mut Suprema)) -> Result<Stub, ClientError> {
        let stub = self.client.locate(object.clone())?;
        let entry = self
            .declared
            .entry(object)
            .or_insert_with(|| (stub.clone(), Suprema::new(0, 0, 0)));
        apply(&mut entry.1);
        Ok(stub)
    }

    /// Declares read operations; `None` means no known bound.
    pub fn reads(&mut self, object: impl Into<ObjectId>, max: Option<u64>) -> Result<Stub, ClientError> {
        self.declare(object.into(), |s| s.max_reads = Bound::from_option(max))
    }

    pub fn writes(&mut self, object: impl Into<ObjectId>, max: Option<u64>) -> Result<Stub, ClientError> {
        self.declare(object.into(), |s| s.max_writes = Bound::from_option(max))
    }

    pub fn updates(&mut self, object: impl Into<ObjectId>, max: Option<u64>) -> Result<Stub, ClientError> {
        self.declare(object.into(), |s| s.max_updates = Bound::from_option(max))
    }

    pub fn accesses(
        &mut self,
        object: impl Into<ObjectId>,
        reads: Option<u64>,
        writes: Option<u64>,
        updates: Option<u64>,
    ) -> Result<Stub, ClientError> {
        self.declare(object.into(), |s| {
            *s = Suprema {
                max_reads: Bound::from_option(reads),
                max_writes: Bound::from_option(writes),
                max_updates: Bound::from_option(updates),
            }
        })
    }

    /// Declares an object with explicit suprema.
    pub fn declare_suprema(&mut self, object: impl Into<ObjectId>, suprema: Suprema) -> Result<Stub, ClientError> {
        self.declare(object.into(), |s| *s = suprema)
    }

    /// Starts an attempt whose operations are driven step by step.
    pub fn begin(&self) -> Result<ActiveTxn<'c>, ClientError> {
        ActiveTxn::begin(self.client, self.algorithm, self.irrevocable, self.declared.values().cloned().collect())
    }

    /// Runs `body` in a transaction, committing when it returns `Ok`.
    /// Returning [`TxnScope::abort`] aborts; [`TxnScope::retry`] aborts and
    /// reruns the body.
    pub fn start<T>(
        &self,
        mut body: impl FnMut(&mut TxnScope<'_, 'c>) -> Result<T, TxnError>,
    ) -> Result<TxnReport<T>, ClientError> {
        let (mut manual, mut forced) = (0, 0);
        let mut attempts = 0;
        loop {
            if attempts >= self.retry.max_attempts {
                return Err(ClientError::AttemptsExhausted(attempts));
            }
            attempts += 1;
            let mut active = self.begin()?;
            let txn = active.id();
            let result = body(&mut TxnScope { txn: &mut active });
            let outcome = match result {
                Ok(value) => match active.commit()? {
                    Ok(()) => Some(Outcome::Committed(value)),
                    Err(cause) => Some(Outcome::Aborted(cause)),
                },
                Err(TxnError::Abort) => {
                    active.abort()?;
                    Some(Outcome::Aborted(AbortCause::Manual))
                }
                Err(TxnError::Retry) => {
                    active.abort()?;
                    manual += 1;
                    None
                }
                Err(TxnError::Forced(_)) => {
                    active.force_abort();
                    Some(Outcome::Aborted(AbortCause::Forced))
                }
                Err(TxnError::Client(e)) => {
                    active.force_abort();
                    return Err(e);
                }
            };
            match outcome {
                Some(Outcome::Aborted(AbortCause::Manual)) => manual += 1,
                Some(Outcome::Aborted(AbortCause::Forced)) => {
                    forced += 1;
                    if self.retry.retry_forced {
                        continue;
                    }
                }
                _ => {}
            }
            if let Some(outcome) = outcome {
                return Ok(TxnReport {
                    outcome,
                    txn,
                    attempts,
                    manual_aborts: manual,
                    forced_aborts: forced,
                });
            }
        }
    }
}

/// Handle passed to a transaction body.
pub struct TxnScope<'a, 'c> {
    txn: &'a mut ActiveTxn<'c>,
}

impl TxnScope<'_, '_> {
    pub fn id(&self) -> TxnId {
        self.txn.id()
    }

    pub fn invoke(&mut self, stub: &Stub, method: &str, args: impl Into<Value>) -> Result<Value, TxnError> {
        self.txn.invoke(stub, method, args)
    }

    /// Ends the attempt with a manual abort.
    pub fn abort<T>(&self) -> Result<T, TxnError> {
        Err(TxnError::Abort)
    }

    /// Aborts and reruns the body.
    pub fn retry<T>(&self) -> Result<T, TxnError> {
        Err(TxnError::Retry)
    }
}

/// One running attempt of a transaction.
pub struct ActiveTxn<'c> {
    client: &'c Client,
    id: TxnId,
    stubs: BTreeMap<ObjectId, Stub>,
    nodes: BTreeSet<NodeId>,
    /// Node holding the global lock, finalized after every other node.
    global_node: Option<NodeId>,
    finished: bool,
}

impl<'c> ActiveTxn<'c> {
    fn begin(
        client: &'c Client,
        algorithm: Algorithm,
        irrevocable: bool,
        declared: Vec<(Stub, Suprema)>,
    ) -> Result<ActiveTxn<'c>, ClientError> {
        let id = TxnId::compose(client.config.id, client.next_seq.fetch_add(1, Ordering::Relaxed));
        let nodes: BTreeSet<NodeId> = declared.iter().map(|(s, _)| s.node).collect();
        client.record(id, EventKind::Begin { irrevocable });
        lock(&client.liveness.active).insert(id, nodes.clone());
        let mut txn = ActiveTxn {
            client,
            id,
            stubs: declared.iter().map(|(s, _)| (s.object.clone(), s.clone())).collect(),
            nodes,
            global_node: None,
            finished: false,
        };
        if let Err(e) = txn.acquire(algorithm, irrevocable, &declared) {
            txn.force_abort();
            return Err(e.into());
        }
        Ok(txn)
    }

    /// Takes version or object locks across nodes in the global object
    /// order, then opens the proxies.
    fn acquire(&mut self, algorithm: Algorithm, irrevocable: bool, declared: &[(Stub, Suprema)]) -> Result<(), CallError> {
        let t = &self.client.transport;
        if algorithm == Algorithm::Glock {
            let first = t
                .nodes()
                .into_iter()
                .min()
                .ok_or_else(|| CallError::Transport("no nodes".into()))?;
            self.nodes.insert(first);
            self.global_node = Some(first);
            lock(&self.client.liveness.active).insert(self.id, self.nodes.clone());
            t.call(
                first,
                Request::Acquire {
                    txn: self.id,
                    algorithm,
                    objects: Vec::new(),
                    global: true,
                },
            )?;
        } else {
            let mut run: Vec<(ObjectId, LockMode)> = Vec::new();
            let mut run_node = None;
            for (stub, suprema) in declared {
                let mode = if algorithm.shares_reads() && suprema.is_read_only() {
                    LockMode::Shared
                } else {
                    LockMode::Exclusive
                };
                if run_node.is_some_and(|n| n != stub.node) {
                    self.send_acquire(run_node.unwrap(), algorithm, std::mem::take(&mut run))?;
                }
                run_node = Some(stub.node);
                run.push((stub.object.clone(), mode));
            }
            if let Some(n) = run_node {
                self.send_acquire(n, algorithm, run)?;
            }
        }
        let mut per_node: BTreeMap<NodeId, Vec<Declaration>> = BTreeMap::new();
        for (stub, suprema) in declared {
            per_node.entry(stub.node).or_default().push(Declaration {
                object: stub.object.clone(),
                suprema: *suprema,
            });
        }
        for (node, declarations) in per_node {
            t.call(
                node,
                Request::OpenProxy {
                    txn: self.id,
                    algorithm,
                    irrevocable,
                    declarations,
                },
            )?;
        }
        Ok(())
    }

    fn send_acquire(&self, node: NodeId, algorithm: Algorithm, objects: Vec<(ObjectId, LockMode)>) -> Result<(), CallError> {
        self.client.transport.call(
            node,
            Request::Acquire {
                txn: self.id,
                algorithm,
                objects,
                global: false,
            },
        )?;
        Ok(())
    }

    pub fn id(&self) -> TxnId {
        self.id
    }

    /// The stub of a declared object.
    pub fn stub(&self, object: &ObjectId) -> Option<Stub> {
        self.stubs.get(object).cloned()
    }

    /// Invokes a method on a declared object. A fault that forces an abort
    /// is returned as [`TxnError::Forced`]; the caller must then end the
    /// attempt.
    pub fn invoke(&mut self, stub: &Stub, method: &str, args: impl Into<Value>) -> Result<Value, TxnError> {
        if self.finished {
            return Err(ClientError::Finished.into());
        }
        if !self.stubs.contains_key(&stub.object) {
            return Err(ClientError::Undeclared(stub.object.clone()).into());
        }
        let class = stub.class_of(method).ok_or_else(|| ClientError::NoSuchMethod {
            object: stub.object.clone(),
            method: method.to_string(),
        })?;
        let args = args.into();
        self.client.record(
            self.id,
            EventKind::Invoke {
                object: stub.object.clone(),
                method: method.to_string(),
                class,
                args: args.clone(),
            },
        );
        let reply = self.client.transport.call(
            stub.node,
            Request::Invoke {
                txn: self.id,
                object: stub.object.clone(),
                method: method.to_string(),
                args,
            },
        );
        match reply {
            Ok(Response::Value(v)) => {
                self.client.record(
                    self.id,
                    EventKind::Response {
                        object: stub.object.clone(),
                        payload: v.clone(),
                    },
                );
                Ok(v)
            }
            Ok(other) => Err(CallError::Transport(format!("unexpected reply to invoke: {other:?}")).into()),
            Err(e) => Err(TxnError::Forced(e.to_string())),
        }
    }

    /// Tries to commit. Returns `Ok(Err(Forced))` when the transaction had
    /// to abort instead.
    pub fn commit(&mut self) -> Result<Result<(), AbortCause>, ClientError> {
        if self.finished {
            return Err(ClientError::Finished);
        }
        let mut doomed = false;
        for node in &self.nodes {
            match self.client.transport.call(*node, Request::Prepare { txn: self.id }) {
                Ok(Response::Prepared { doomed: d }) => doomed |= d,
                Ok(_) | Err(_) => doomed = true,
            }
            if doomed {
                break;
            }
        }
        if doomed {
            self.force_abort();
            return Ok(Err(AbortCause::Forced));
        }
        self.client.record(self.id, EventKind::Commit);
        self.finish(true);
        Ok(Ok(()))
    }

    /// Aborts on request of the program.
    pub fn abort(&mut self) -> Result<(), ClientError> {
        if self.finished {
            return Err(ClientError::Finished);
        }
        self.client.record(
            self.id,
            EventKind::Abort {
                cause: AbortCause::Manual,
            },
        );
        self.finish(false);
        Ok(())
    }

    /// Ends the attempt after a fault.
    pub fn force_abort(&mut self) {
        if self.finished {
            return;
        }
        self.client.record(
            self.id,
            EventKind::Abort {
                cause: AbortCause::Forced,
            },
        );
        self.finish(false);
    }

    fn finish(&mut self, commit: bool) {
        self.finished = true;
        let rest = self.nodes.iter().filter(|n| Some(**n) != self.global_node);
        for node in rest.chain(&self.global_node) {
            // A node that already rolled the transaction back or became
            // unreachable has nothing left to finalize.
            let _ = self
                .client
                .transport
                .call(*node, Request::Finalize { txn: self.id, commit });
        }
        lock(&self.client.liveness.active).remove(&self.id);
    }
}

impl Drop for ActiveTxn<'_> {
    fn drop(&mut self) {
        self.force_abort();
    }
}

fn spawn_heartbeat(liveness: Weak<Liveness>, transport: Arc<dyn Transport>, every: Duration) {
    thread::Builder::new()
        .name("heartbeat".into())
        .spawn(move || loop {
            thread::sleep(every);
            let Some(l) = liveness.upgrade() else { return };
            if l.paused.load(Ordering::SeqCst) {
                continue;
            }
            let mut per_node: BTreeMap<NodeId, Vec<TxnId>> = BTreeMap::new();
            for (txn, nodes) in lock(&l.active).iter() {
                for n in nodes {
                    per_node.entry(*n).or_default().push(*txn);
                }
            }
            drop(l);
            for (node, txns) in per_node {
                let _ = transport.call(node, Request::Heartbeat { txns });
            }
        })
        .expect("spawn heartbeat thread");
}
