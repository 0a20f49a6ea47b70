//! Scripted three-transaction executions that make single mechanisms of
//! OptSVA-CF observable: access control, early release, cascading abort,
//! read-only buffering and asynchronous last writes.
//!
//! Each scenario fixes the interleaving with `Recorder::wait_for`, then
//! checks the recorded history.

use std::fmt;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use crate::client::{ActiveTxn, Client, ClientError};
use crate::cluster::Cluster;
use crate::engine::Algorithm;
use crate::history::{AbortCause, EventKind, History, HistoryEvent, Recorder};
use crate::ids::{ObjectId, TxnId};
use crate::object::catalog;
use crate::value::Value;

const WAIT: Duration = Duration::from_secs(10);
/// Time given to a transaction that is expected to stay blocked.
const SETTLE: Duration = Duration::from_millis(50);

pub const NAMES: [&str; 5] = [
    "access-control",
    "early-release",
    "cascade",
    "read-only-async",
    "last-write-async",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Check {
    pub name: String,
    pub expected: String,
    pub observed: String,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.expected == self.observed
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioReport {
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub history: History,
    /// Transactions in script order: T_i, T_j, T_k.
    pub txns: [TxnId; 3],
}

impl ScenarioReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(Check::ok)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    /// Values returned to `txn` by invocations on `object`, in order.
    pub fn responses(&self, txn: TxnId, object: &str) -> Vec<Value> {
        responses(&self.history, txn, object)
    }
}

impl fmt::Display for ScenarioReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario {}", self.name)?;
        for c in &self.checks {
            let mark = if c.ok() { "ok  " } else { "FAIL" };
            writeln!(f, "  {mark} {}: expected {}, observed {}", c.name, c.expected, c.observed)?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("unknown scenario `{0}`")]
    Unknown(String),
    #[error(transparent)]
    Client(#[from] ClientError),
}

pub fn run(name: &str) -> Result<ScenarioReport, ScenarioError> {
    match name {
        "access-control" => access_control(),
        "early-release" => early_release(),
        "cascade" => cascade(),
        "read-only-async" => read_only_async(),
        "last-write-async" => last_write_async(),
        other => Err(ScenarioError::Unknown(other.to_string())),
    }
}

fn responses(h: &History, txn: TxnId, object: &str) -> Vec<Value> {
    h.of_txn(txn)
        .filter_map(|e| match &e.kind {
            EventKind::Response { object: o, payload } if o.as_str() == object => Some(payload.clone()),
            _ => None,
        })
        .collect()
}

fn seq_of(h: &History, txn: TxnId, pred: impl Fn(&EventKind) -> bool) -> Option<u64> {
    h.first(|e| e.txn == Some(txn) && pred(&e.kind)).map(|e| e.seq)
}

fn is_response(object: &str) -> impl Fn(&EventKind) -> bool + '_ {
    move |k| matches!(k, EventKind::Response { object: o, .. } if o.as_str() == object)
}

fn is_invoke(object: &str) -> impl Fn(&EventKind) -> bool + '_ {
    move |k| matches!(k, EventKind::Invoke { object: o, .. } if o.as_str() == object)
}

fn is_access(object: &str) -> impl Fn(&EventKind) -> bool + '_ {
    move |k| matches!(k, EventKind::Access { object: o, .. } if o.as_str() == object)
}

fn is_release(object: &str) -> impl Fn(&EventKind) -> bool + '_ {
    move |k| matches!(k, EventKind::Release { object: o, .. } if o.as_str() == object)
}

fn is_commit(k: &EventKind) -> bool {
    matches!(k, EventKind::Commit)
}

/// Blocks until `txn` records an event matching `pred`.
fn wait_until(rec: &Recorder, txn: TxnId, pred: impl Fn(&EventKind) -> bool) -> bool {
    rec.wait_for(WAIT, |e: &HistoryEvent| e.txn == Some(txn) && pred(&e.kind))
        .is_some()
}

fn before(name: &str, a: Option<u64>, b: Option<u64>) -> Check {
    let observed = match (a, b) {
        (Some(a), Some(b)) if a < b => "before",
        (Some(_), Some(_)) => "after",
        _ => "missing",
    };
    Check {
        name: name.to_string(),
        expected: "before".into(),
        observed: observed.into(),
    }
}

fn equals(name: &str, expected: impl fmt::Debug, observed: impl fmt::Debug) -> Check {
    Check {
        name: name.to_string(),
        expected: format!("{expected:?}"),
        observed: format!("{observed:?}"),
    }
}

fn int(v: i64) -> Value {
    Value::Int(v)
}

fn final_value(cluster: &Cluster, object: &str) -> Option<Value> {
    cluster.state_of(object).and_then(|s| s.get("value").cloned())
}

type Outcome = Result<Result<(), AbortCause>, ClientError>;

struct Setup {
    cluster: Cluster,
    recorder: Arc<Recorder>,
    clients: [Client; 3],
}

/// One node with a counter `y` and an `x` that is a counter, or a cell
/// when `cell` is set.
fn setup(cell: bool) -> Setup {
    let cluster = Cluster::recorded(1);
    let (def, state) = if cell {
        (catalog::cell(Duration::ZERO), catalog::cell_state(0))
    } else {
        (catalog::counter(), catalog::counter_state(0))
    };
    cluster.register(0, "x", def, state).expect("fresh node");
    cluster
        .register(0, "y", catalog::counter(), catalog::counter_state(0))
        .expect("fresh node");
    let recorder = cluster.recorder.clone().expect("recorded cluster");
    let clients = [1, 2, 3].map(|c| cluster.client(c, Algorithm::OptsvaCf));
    Setup {
        cluster,
        recorder,
        clients,
    }
}

fn invoke(t: &mut ActiveTxn<'_>, object: &str, method: &str, args: impl Into<Value>) -> Option<Value> {
    let stub = t.stub(&ObjectId::new(object))?;
    t.invoke(&stub, method, args).ok()
}

/// T_j waits for T_i to commit before it may touch `x`; T_k works on `y`
/// undisturbed meanwhile.
fn access_control() -> Result<ScenarioReport, ScenarioError> {
    let s = setup(false);
    let [ci, cj, ck] = &s.clients;
    let mut t = ci.transaction();
    t.updates("x", None)?;
    let mut ti = t.begin()?;
    let mut t = cj.transaction();
    t.updates("x", Some(1))?;
    let mut tj = t.begin()?;
    let mut t = ck.transaction();
    t.updates("y", Some(1))?;
    let mut tk = t.begin()?;
    let ids = [ti.id(), tj.id(), tk.id()];
    let rec = &s.recorder;
    thread::scope(|sc| {
        sc.spawn(|| -> Outcome {
            invoke(&mut ti, "x", "increment", ());
            wait_until(rec, ids[1], is_invoke("x"));
            wait_until(rec, ids[2], is_commit);
            thread::sleep(SETTLE);
            ti.commit()
        });
        sc.spawn(|| -> Outcome {
            wait_until(rec, ids[0], is_response("x"));
            invoke(&mut tj, "x", "increment", ());
            tj.commit()
        });
        sc.spawn(|| -> Outcome {
            wait_until(rec, ids[1], is_invoke("x"));
            invoke(&mut tk, "y", "increment", ());
            tk.commit()
        });
    });
    let h = s.cluster.finish();
    let commit_i = seq_of(&h, ids[0], is_commit);
    let checks = vec![
        before("T_i commits before T_j's x.op returns", commit_i, seq_of(&h, ids[1], is_response("x"))),
        before("T_i releases x before T_j accesses it", seq_of(&h, ids[0], is_release("x")), seq_of(&h, ids[1], is_access("x"))),
        before("T_k commits while T_i still holds x", seq_of(&h, ids[2], is_commit), commit_i),
        equals("T_j increments x to", vec![int(2)], responses(&h, ids[1], "x")),
        equals("final x", Some(int(2)), final_value(&s.cluster, "x")),
        equals("final y", Some(int(1)), final_value(&s.cluster, "y")),
    ];
    Ok(ScenarioReport {
        name: "access-control",
        checks,
        history: h,
        txns: ids,
    })
}

/// T_i's last operation on `x` releases it, so T_j reads T_i's value
/// before T_i commits.
fn early_release() -> Result<ScenarioReport, ScenarioError> {
    let s = setup(false);
    let [ci, cj, _] = &s.clients;
    let mut t = ci.transaction();
    t.updates("x", Some(1))?;
    let mut ti = t.begin()?;
    let mut t = cj.transaction();
    t.updates("x", Some(1))?;
    let mut tj = t.begin()?;
    let ids = [ti.id(), tj.id(), TxnId(0)];
    let rec = &s.recorder;
    let (oi, oj) = thread::scope(|sc| {
        let a = sc.spawn(|| -> Outcome {
            invoke(&mut ti, "x", "increment", ());
            wait_until(rec, ids[1], is_response("x"));
            ti.commit()
        });
        let b = sc.spawn(|| -> Outcome {
            invoke(&mut tj, "x", "increment", ());
            tj.commit()
        });
        (a.join().expect("T_i"), b.join().expect("T_j"))
    });
    let h = s.cluster.finish();
    let commit_i = seq_of(&h, ids[0], is_commit);
    let checks = vec![
        before("T_i releases x before committing", seq_of(&h, ids[0], is_release("x")), commit_i),
        before("T_j's x.op returns before T_i commits", seq_of(&h, ids[1], is_response("x")), commit_i),
        before("T_j commits after T_i", commit_i, seq_of(&h, ids[1], is_commit)),
        equals("T_j reads T_i's increment", vec![int(2)], responses(&h, ids[1], "x")),
        equals("outcomes", (true, true), (matches!(oi, Ok(Ok(()))), matches!(oj, Ok(Ok(()))))),
        equals("final x", Some(int(2)), final_value(&s.cluster, "x")),
    ];
    Ok(ScenarioReport {
        name: "early-release",
        checks,
        history: h,
        txns: ids,
    })
}

/// T_j consumes the value T_i released early; T_i then aborts, so T_j is
/// forced to abort at commit and `x` returns to its initial state.
fn cascade() -> Result<ScenarioReport, ScenarioError> {
    let s = setup(false);
    let [ci, cj, _] = &s.clients;
    let mut t = ci.transaction();
    t.updates("x", Some(1))?;
    let mut ti = t.begin()?;
    let mut t = cj.transaction();
    t.updates("x", Some(1))?;
    let mut tj = t.begin()?;
    let ids = [ti.id(), tj.id(), TxnId(0)];
    let rec = &s.recorder;
    let oj = thread::scope(|sc| {
        sc.spawn(|| {
            invoke(&mut ti, "x", "increment", ());
            wait_until(rec, ids[1], is_response("x"));
            thread::sleep(SETTLE);
            ti.abort()
        });
        sc.spawn(|| -> Outcome {
            invoke(&mut tj, "x", "increment", ());
            tj.commit()
        })
        .join()
        .expect("T_j")
    });
    let h = s.cluster.finish();
    let abort_i = seq_of(&h, ids[0], |k| matches!(k, EventKind::Abort { cause: AbortCause::Manual }));
    let checks = vec![
        equals("T_j reads T_i's released value", vec![int(2)], responses(&h, ids[1], "x")),
        before("T_i aborts before T_j's commit attempt ends", abort_i, seq_of(&h, ids[1], |k| matches!(k, EventKind::Abort { .. } | EventKind::Commit))),
        equals("T_j outcome", "Ok(Err(Forced))", format!("{:?}", oj.map_err(|e| e.to_string()))),
        equals("final x equals T_i's checkpoint", Some(int(0)), final_value(&s.cluster, "x")),
    ];
    Ok(ScenarioReport {
        name: "cascade",
        checks,
        history: h,
        txns: ids,
    })
}

/// T_j only reads `x`: a background task copies and releases it as soon as
/// T_i is done, so T_k proceeds before T_j performs any read.
fn read_only_async() -> Result<ScenarioReport, ScenarioError> {
    let s = setup(true);
    let [ci, cj, ck] = &s.clients;
    let mut t = ci.transaction();
    t.writes("x", Some(1))?;
    let mut ti = t.begin()?;
    let mut t = cj.transaction();
    t.reads("x", Some(2))?;
    let mut tj = t.begin()?;
    let mut t = ck.transaction();
    t.accesses("x", Some(1), Some(1), Some(0))?;
    let mut tk = t.begin()?;
    let ids = [ti.id(), tj.id(), tk.id()];
    let rec = &s.recorder;
    thread::scope(|sc| {
        sc.spawn(|| -> Outcome {
            invoke(&mut ti, "x", "write", 1);
            ti.commit()
        });
        sc.spawn(|| -> Outcome {
            // Hold back the first read until T_k is in.
            wait_until(rec, ids[2], is_access("x"));
            invoke(&mut tj, "x", "read", ());
            invoke(&mut tj, "x", "read", ());
            tj.commit()
        });
        sc.spawn(|| -> Outcome {
            invoke(&mut tk, "x", "read", ());
            invoke(&mut tk, "x", "write", 2);
            tk.commit()
        });
    });
    let h = s.cluster.finish();
    let checks = vec![
        before("T_j releases x before its first read", seq_of(&h, ids[1], is_release("x")), seq_of(&h, ids[1], is_invoke("x"))),
        before("T_k accesses x before T_j's first read returns", seq_of(&h, ids[2], is_access("x")), seq_of(&h, ids[1], is_response("x"))),
        equals("T_j reads", vec![int(1), int(1)], responses(&h, ids[1], "x")),
        equals("T_k reads and writes", vec![int(1), Value::Unit], responses(&h, ids[2], "x")),
        equals("final x", Some(int(2)), final_value(&s.cluster, "x")),
    ];
    Ok(ScenarioReport {
        name: "read-only-async",
        checks,
        history: h,
        txns: ids,
    })
}

/// T_j's writes to `x` go to a log while T_i still holds it; T_j moves on
/// to `y`, and a background task applies the log and releases `x` once
/// T_i is done.
fn last_write_async() -> Result<ScenarioReport, ScenarioError> {
    let s = setup(true);
    let [ci, cj, ck] = &s.clients;
    let mut t = ci.transaction();
    t.accesses("x", Some(1), Some(1), Some(0))?;
    let mut ti = t.begin()?;
    let mut t = cj.transaction();
    t.accesses("x", Some(1), Some(2), Some(0))?;
    t.updates("y", Some(1))?;
    let mut tj = t.begin()?;
    let mut t = ck.transaction();
    t.accesses("x", Some(1), Some(1), Some(0))?;
    let mut tk = t.begin()?;
    let ids = [ti.id(), tj.id(), tk.id()];
    let rec = &s.recorder;
    thread::scope(|sc| {
        sc.spawn(|| -> Outcome {
            wait_until(rec, ids[1], is_response("y"));
            invoke(&mut ti, "x", "read", ());
            invoke(&mut ti, "x", "write", 1);
            ti.commit()
        });
        sc.spawn(|| -> Outcome {
            invoke(&mut tj, "x", "write", 2);
            invoke(&mut tj, "x", "write", 3);
            invoke(&mut tj, "y", "increment", ());
            invoke(&mut tj, "x", "read", ());
            wait_until(rec, ids[2], is_access("x"));
            tj.commit()
        });
        sc.spawn(|| -> Outcome {
            invoke(&mut tk, "x", "read", ());
            invoke(&mut tk, "x", "write", 4);
            tk.commit()
        });
    });
    let h = s.cluster.finish();
    let tj_reads: Vec<Value> = responses(&h, ids[1], "x").into_iter().filter(|v| *v != Value::Unit).collect();
    let checks = vec![
        before("T_j's y op starts before T_j accesses x", seq_of(&h, ids[1], is_invoke("y")), seq_of(&h, ids[1], is_access("x"))),
        before("T_i releases x before T_j accesses it", seq_of(&h, ids[0], is_release("x")), seq_of(&h, ids[1], is_access("x"))),
        before("T_k accesses x before T_j commits", seq_of(&h, ids[2], is_access("x")), seq_of(&h, ids[1], is_commit)),
        equals("T_i reads", vec![int(0), Value::Unit], responses(&h, ids[0], "x")),
        equals("T_j reads its own last write", vec![int(3)], tj_reads),
        equals("T_k reads T_j's last write", vec![int(3), Value::Unit], responses(&h, ids[2], "x")),
        equals("final x", Some(int(4)), final_value(&s.cluster, "x")),
        equals("final y", Some(int(1)), final_value(&s.cluster, "y")),
    ];
    Ok(ScenarioReport {
        name: "last-write-async",
        checks,
        history: h,
        txns: ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::check::{check_serializable, check_version_order};

    #[test]
    fn every_scenario_passes() {
        for name in NAMES {
            let r = run(name).unwrap();
            assert!(r.pass(), "{r}");
            assert!(check_version_order(&r.history).is_empty(), "{name}");
            assert!(check_serializable(&r.history).is_serializable(), "{name}");
        }
    }

    #[test]
    fn unknown_scenario() {
        assert!(matches!(run("nope"), Err(ScenarioError::Unknown(_))));
    }
}
