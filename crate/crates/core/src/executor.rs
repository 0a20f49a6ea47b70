//! Per-node condition-task scheduler.
//!
//! A task is a condition over one object's counters plus an action. Tasks
//! whose condition is false are parked under their object's id and
//! re-evaluated whenever that object's counters change. Ready actions run on
//! a small worker pool in the order they became ready.

use std::collections::HashMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard, Weak};
use std::thread;

use crossbeam_channel::{unbounded, Sender};

use crate::ids::{ObjectId, TxnId};
use crate::versioning::{Condition, CounterObserver, Counters, VersionedObject};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TaskError {
    #[error("task failed: {0}")]
    Failed(String),
    #[error("task panicked: {0}")]
    Panicked(String),
}

pub type TaskOutcome = Result<(), TaskError>;
pub type TaskAction = Box<dyn FnOnce() -> TaskOutcome + Send>;
pub type TaskPredicate = Box<dyn Fn(Counters) -> bool + Send + Sync>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

/// Joinable completion of a submitted task. Clones share the outcome.
#[derive(Clone)]
pub struct TaskHandle {
    id: u64,
    slot: Arc<(Mutex<Option<TaskOutcome>>, Condvar)>,
}

impl fmt::Debug for TaskHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TaskHandle")
            .field("id", &self.id)
            .field("done", &self.is_done())
            .finish()
    }
}

impl TaskHandle {
    fn new(id: u64) -> Self {
        TaskHandle {
            id,
            slot: Arc::new((Mutex::new(None), Condvar::new())),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    fn complete(&self, outcome: TaskOutcome) {
        let (m, cv) = &*self.slot;
        *lock(m) = Some(outcome);
        cv.notify_all();
    }

    pub fn is_done(&self) -> bool {
        lock(&self.slot.0).is_some()
    }

    /// Blocks until the action has run and returns its outcome.
    pub fn join(&self) -> TaskOutcome {
        let (m, cv) = &*self.slot;
        let mut g = lock(m);
        loop {
            if let Some(outcome) = g.as_ref() {
                return outcome.clone();
            }
            g = cv.wait(g).unwrap_or_else(|e| e.into_inner());
        }
    }
}

pub struct ConditionTask {
    pub origin: TxnId,
    pub object: Arc<VersionedObject>,
    pub condition: TaskPredicate,
    pub action: TaskAction,
}

impl ConditionTask {
    pub fn new(
        origin: TxnId,
        object: Arc<VersionedObject>,
        condition: Condition,
        action: impl FnOnce() -> TaskOutcome + Send + 'static,
    ) -> Self {
        ConditionTask {
            origin,
            object,
            condition: Box::new(move |c| condition.holds(c)),
            action: Box::new(action),
        }
    }
}

struct Parked {
    task: ConditionTask,
    handle: TaskHandle,
}

type Job = Box<dyn FnOnce() + Send>;

struct Inner {
    parked: Mutex<HashMap<ObjectId, Vec<Parked>>>,
    jobs: Sender<Job>,
    next_id: AtomicU64,
}

impl Inner {
    fn dispatch(self: &Arc<Self>, parked: Parked) {
        let weak = Arc::downgrade(self);
        let job: Job = Box::new(move || {
            let Parked { task, handle } = parked;
            // Conditions are stable once true; re-check anyway so an action
            // never observes a false condition.
            if !(task.condition)(task.object.counters()) {
                if let Some(inner) = weak.upgrade() {
                    inner.park_or_dispatch(Parked { task, handle });
                }
                return;
            }
            let outcome = match catch_unwind(AssertUnwindSafe(task.action)) {
                Ok(outcome) => outcome,
                Err(panic) => {
                    let msg = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "unknown panic".to_string());
                    Err(TaskError::Panicked(msg))
                }
            };
            handle.complete(outcome);
        });
        // Send fails only once every worker has exited, i.e. during teardown.
        let _ = self.jobs.send(job);
    }

    fn park_or_dispatch(self: &Arc<Self>, parked: Parked) {
        let mut map = lock(&self.parked);
        if (parked.task.condition)(parked.task.object.counters()) {
            drop(map);
            self.dispatch(parked);
        } else {
            map.entry(parked.task.object.id().clone())
                .or_default()
                .push(parked);
        }
    }
}

struct Observer(Weak<Inner>);

impl CounterObserver for Observer {
    fn on_counter_change(&self, object: &ObjectId) {
        let Some(inner) = self.0.upgrade() else {
            return;
        };
        let ready = {
            let mut map = lock(&inner.parked);
            let Some(waiting) = map.remove(object) else {
                return;
            };
            let mut ready = Vec::new();
            let mut still = Vec::new();
            for p in waiting {
                if (p.task.condition)(p.task.object.counters()) {
                    ready.push(p);
                } else {
                    still.push(p);
                }
            }
            if !still.is_empty() {
                map.insert(object.clone(), still);
            }
            ready
        };
        for p in ready {
            inner.dispatch(p);
        }
    }
}

/// One executor serves every transaction on a node.
pub struct Executor {
    inner: Arc<Inner>,
    observer: Arc<Observer>,
}

impl fmt::Debug for Executor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Executor")
            .field("parked", &self.parked_count())
            .finish()
    }
}

impl Executor {
    pub fn new(workers: usize) -> Self {
        let (tx, rx) = unbounded::<Job>();
        for i in 0..workers.max(1) {
            let rx = rx.clone();
            thread::Builder::new()
                .name(format!("executor-{i}"))
                .spawn(move || {
                    while let Ok(job) = rx.recv() {
                        job();
                    }
                })
                .expect("spawn executor worker");
        }
        let inner = Arc::new(Inner {
            parked: Mutex::new(HashMap::new()),
            jobs: tx,
            next_id: AtomicU64::new(1),
        });
        let observer = Arc::new(Observer(Arc::downgrade(&inner)));
        Executor { inner, observer }
    }

    /// The hook versioned objects call after each counter change.
    pub fn observer(&self) -> Weak<dyn CounterObserver> {
        let strong: Arc<dyn CounterObserver> = self.observer.clone();
        Arc::downgrade(&strong)
    }

    /// Registers `object` so counter changes reach this executor.
    pub fn watch(&self, object: &VersionedObject) {
        object.set_observer(self.observer());
    }

    pub fn submit(&self, task: ConditionTask) -> TaskHandle {
        let handle = TaskHandle::new(self.inner.next_id.fetch_add(1, Ordering::Relaxed));
        self.inner.park_or_dispatch(Parked {
            task,
            handle: handle.clone(),
        });
        handle
    }

    /// Re-evaluates parked tasks for `object`; normally invoked through the
    /// observer hook.
    pub fn on_counter_change(&self, object: &ObjectId) {
        self.observer.on_counter_change(object);
    }

    pub fn parked_count(&self) -> usize {
        lock(&self.inner.parked).values().map(Vec::len).sum()
    }
}
