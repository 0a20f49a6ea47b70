//! Execution histories: events recorded by nodes and clients, stored as one
//! JSON object per line.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::ids::{NodeId, ObjectId, TxnId, Version};
use crate::object::OperationClass;
use crate::value::{State, Value};

pub mod check;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbortCause {
    Manual,
    Forced,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    /// Initial state of an object at registration.
    Init {
        object: ObjectId,
        type_name: String,
        state: State,
    },
    Begin {
        irrevocable: bool,
    },
    Acquire {
        object: ObjectId,
        pv: Version,
    },
    /// First consumption of the object's state by a transaction.
    Access {
        object: ObjectId,
        pv: Version,
    },
    Invoke {
        object: ObjectId,
        method: String,
        class: OperationClass,
        args: Value,
    },
    Response {
        object: ObjectId,
        payload: Value,
    },
    Release {
        object: ObjectId,
        pv: Version,
    },
    Lock {
        object: ObjectId,
    },
    Unlock {
        object: ObjectId,
    },
    Commit,
    Abort {
        cause: AbortCause,
    },
    /// State of an object at the end of a run.
    Final {
        object: ObjectId,
        state: State,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub seq: u64,
    pub time: u64,
    pub node: Option<NodeId>,
    pub txn: Option<TxnId>,
    #[serde(flatten)]
    pub kind: EventKind,
}

impl HistoryEvent {
    pub fn object(&self) -> Option<&ObjectId> {
        match &self.kind {
            EventKind::Init { object, .. }
            | EventKind::Acquire { object, .. }
            | EventKind::Access { object, .. }
            | EventKind::Invoke { object, .. }
            | EventKind::Response { object, .. }
            | EventKind::Release { object, .. }
            | EventKind::Lock { object }
            | EventKind::Unlock { object }
            | EventKind::Final { object, .. } => Some(object),
            EventKind::Begin { .. } | EventKind::Commit | EventKind::Abort { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Clock {
    /// Time is the global sequence number: a total order with no skew.
    Virtual,
    /// Microseconds since the recorder was created.
    Wall(Instant),
}

impl Clock {
    pub fn wall() -> Self {
        Clock::Wall(Instant::now())
    }
}

struct Log {
    events: Vec<HistoryEvent>,
}

/// Append-only event log shared by the nodes and clients of one run.
pub struct Recorder {
    clock: Clock,
    log: Mutex<Log>,
    appended: Condvar,
}

impl std::fmt::Debug for Recorder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Recorder")
            .field("clock", &self.clock)
            .field("events", &self.lock().events.len())
            .finish()
    }
}

impl Default for Recorder {
    fn default() -> Self {
        Recorder::new(Clock::Virtual)
    }
}

impl Recorder {
    pub fn new(clock: Clock) -> Self {
        Recorder {
            clock,
            log: Mutex::new(Log { events: Vec::new() }),
            appended: Condvar::new(),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Log> {
        self.log.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn record(&self, node: Option<NodeId>, txn: Option<TxnId>, kind: EventKind) -> u64 {
        let mut log = self.lock();
        let seq = log.events.len() as u64 + 1;
        let time = match self.clock {
            Clock::Virtual => seq,
            Clock::Wall(start) => start.elapsed().as_micros() as u64,
        };
        log.events.push(HistoryEvent {
            seq,
            time,
            node,
            txn,
            kind,
        });
        drop(log);
        self.appended.notify_all();
        seq
    }

    pub fn len(&self) -> usize {
        self.lock().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn snapshot(&self) -> History {
        History {
            events: self.lock().events.clone(),
        }
    }

    /// Blocks until an event matching `pred` has been recorded or `timeout`
    /// passes. Returns the matching event's seq.
    pub fn wait_for(
        &self,
        timeout: Duration,
        pred: impl Fn(&HistoryEvent) -> bool,
    ) -> Option<u64> {
        let deadline = Instant::now() + timeout;
        let mut log = self.lock();
        let mut scanned = 0;
        loop {
            if let Some(e) = log.events[scanned..].iter().find(|e| pred(e)) {
                return Some(e.seq);
            }
            scanned = log.events.len();
            let now = Instant::now();
            if now >= deadline {
                return None;
            }
            log = self
                .appended
                .wait_timeout(log, deadline - now)
                .unwrap_or_else(|e| e.into_inner())
                .0;
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HistoryIoError {
    #[error("history i/o: {0}")]
    Io(#[from] io::Error),
    #[error("history line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

/// A recorded execution, ordered by `(time, seq)`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct History {
    pub events: Vec<HistoryEvent>,
}

impl History {
    pub fn new(events: Vec<HistoryEvent>) -> Self {
        History { events }
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Merges per-process logs by `(time, seq)`; the node id breaks the
    /// remaining ties so the result is deterministic.
    pub fn merge(parts: impl IntoIterator<Item = History>) -> History {
        let mut events: Vec<HistoryEvent> = parts.into_iter().flat_map(|h| h.events).collect();
        events.sort_by_key(|e| (e.time, e.seq, e.node));
        History { events }
    }

    pub fn first(&self, pred: impl Fn(&HistoryEvent) -> bool) -> Option<&HistoryEvent> {
        self.events.iter().find(|e| pred(e))
    }

    /// Position of the first matching event in the history order.
    pub fn position(&self, pred: impl Fn(&HistoryEvent) -> bool) -> Option<usize> {
        self.events.iter().position(pred)
    }

    pub fn of_txn(&self, txn: TxnId) -> impl Iterator<Item = &HistoryEvent> {
        self.events.iter().filter(move |e| e.txn == Some(txn))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), HistoryIoError> {
        let mut out = BufWriter::new(File::create(path)?);
        for e in &self.events {
            serde_json::to_writer(&mut out, e).map_err(io::Error::other)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<History, HistoryIoError> {
        let reader = BufReader::new(File::open(path)?);
        let mut events = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e = serde_json::from_str(&line).map_err(|source| HistoryIoError::Parse {
                line: i + 1,
                source,
            })?;
            events.push(e);
        }
        Ok(History { events })
    }
}
