//! Offline checks over recorded histories: version-ordered access,
//! serializability by brute-force replay, and abort accounting.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::Serialize;

use super::{AbortCause, EventKind, History};
use crate::ids::{ObjectId, TxnId, Version};
use crate::object::{catalog, SharedObjectDef};
use crate::value::{State, Value};

/// Largest number of committed transactions the serializability check
/// enumerates.
pub const SERIALIZABILITY_BOUND: usize = 7;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum VersionViolation {
    /// An access with a version not above one already seen on the object.
    OutOfOrder {
        object: ObjectId,
        previous: Version,
        pv: Version,
        seq: u64,
    },
    /// An access before the predecessor version was released.
    Premature {
        object: ObjectId,
        pv: Version,
        seq: u64,
    },
}

impl fmt::Display for VersionViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            VersionViolation::OutOfOrder {
                object,
                previous,
                pv,
                seq,
            } => write!(f, "{object}: access by pv {pv} after pv {previous} (event {seq})"),
            VersionViolation::Premature { object, pv, seq } => {
                write!(f, "{object}: access by pv {pv} before pv {} released (event {seq})", pv - 1)
            }
        }
    }
}

/// Per object, accesses must follow ascending private versions and each
/// must come after its predecessor's release. Reports the first break per
/// object.
pub fn check_version_order(history: &History) -> Vec<VersionViolation> {
    let mut released: HashMap<&ObjectId, BTreeSet<Version>> = HashMap::new();
    let mut last: HashMap<&ObjectId, Version> = HashMap::new();
    let mut broken: BTreeMap<&ObjectId, VersionViolation> = BTreeMap::new();
    for e in &history.events {
        match &e.kind {
            EventKind::Release { object, pv } => {
                released.entry(object).or_default().insert(*pv);
            }
            EventKind::Access { object, pv } => {
                if broken.contains_key(object) {
                    continue;
                }
                let previous = last.get(object).copied().unwrap_or(0);
                let violation = if *pv <= previous {
                    Some(VersionViolation::OutOfOrder {
                        object: object.clone(),
                        previous,
                        pv: *pv,
                        seq: e.seq,
                    })
                } else if *pv > 1
                    && !released.get(object).is_some_and(|r| r.contains(&(pv - 1)))
                {
                    Some(VersionViolation::Premature {
                        object: object.clone(),
                        pv: *pv,
                        seq: e.seq,
                    })
                } else {
                    None
                };
                match violation {
                    Some(v) => {
                        broken.insert(object, v);
                    }
                    None => {
                        last.insert(object, *pv);
                    }
                }
            }
            _ => {}
        }
    }
    broken.into_values().collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Serializability {
    /// A witness serial order.
    Serializable(Vec<TxnId>),
    NotSerializable,
    /// The history could not be checked; never a pass.
    Unchecked(String),
}

impl Serializability {
    pub fn is_serializable(&self) -> bool {
        matches!(self, Serializability::Serializable(_))
    }
}

#[derive(Clone, Debug)]
struct Op {
    object: ObjectId,
    method: String,
    args: Value,
    response: Option<Value>,
}

struct Replay<'a> {
    txns: Vec<TxnId>,
    ops: Vec<Vec<Op>>,
    /// `preds[i]` holds indices that must precede `i` in real time.
    preds: Vec<Vec<usize>>,
    defs: &'a BTreeMap<ObjectId, SharedObjectDef>,
    finals: &'a BTreeMap<ObjectId, State>,
}

impl Replay<'_> {
    fn run(&self, states: &mut BTreeMap<ObjectId, State>, txn: usize) -> bool {
        for op in &self.ops[txn] {
            let (Some(def), Some(state)) = (self.defs.get(&op.object), states.get_mut(&op.object)) else {
                return false;
            };
            match def.invoke(state, &op.method, &op.args) {
                Ok(out) => {
                    if op.response.as_ref().is_some_and(|r| *r != out) {
                        return false;
                    }
                }
                Err(_) => return false,
            }
        }
        true
    }

    fn search(
        &self,
        states: &BTreeMap<ObjectId, State>,
        placed: &mut Vec<usize>,
        used: &mut [bool],
    ) -> bool {
        if placed.len() == self.txns.len() {
            return self
                .finals
                .iter()
                .all(|(obj, fin)| states.get(obj).is_some_and(|s| s == fin));
        }
        for i in 0..self.txns.len() {
            if used[i] || self.preds[i].iter().any(|p| !used[*p]) {
                continue;
            }
            let mut next = states.clone();
            if !self.run(&mut next, i) {
                continue;
            }
            used[i] = true;
            placed.push(i);
            if self.search(&next, placed, used) {
                return true;
            }
            placed.pop();
            used[i] = false;
        }
        false
    }
}

/// True iff some order of the committed transactions that respects real-time
/// precedence replays, from the recorded initial states, to the same
/// responses and final states.
pub fn check_serializable(history: &History) -> Serializability {
    let mut defs = BTreeMap::new();
    let mut initial = BTreeMap::new();
    let mut finals = BTreeMap::new();
    let mut begin: HashMap<TxnId, usize> = HashMap::new();
    let mut commit: HashMap<TxnId, usize> = HashMap::new();
    let mut ops: HashMap<TxnId, Vec<Op>> = HashMap::new();
    for (pos, e) in history.events.iter().enumerate() {
        match &e.kind {
            EventKind::Init {
                object,
                type_name,
                state,
            } => {
                let Some(def) = catalog::lookup(type_name) else {
                    return Serializability::Unchecked(format!("unknown object type `{type_name}`"));
                };
                defs.insert(object.clone(), def);
                initial.insert(object.clone(), state.clone());
            }
            EventKind::Final { object, state } => {
                finals.insert(object.clone(), state.clone());
            }
            EventKind::Begin { .. } => {
                if let Some(t) = e.txn {
                    begin.entry(t).or_insert(pos);
                }
            }
            EventKind::Commit => {
                if let Some(t) = e.txn {
                    commit.insert(t, pos);
                }
            }
            EventKind::Invoke {
                object,
                method,
                args,
                ..
            } => {
                if let Some(t) = e.txn {
                    ops.entry(t).or_default().push(Op {
                        object: object.clone(),
                        method: method.clone(),
                        args: args.clone(),
                        response: None,
                    });
                }
            }
            EventKind::Response { object, payload } => {
                let Some(t) = e.txn else { continue };
                let Some(op) = ops.get_mut(&t).and_then(|v| v.last_mut()) else {
                    return Serializability::Unchecked(format!("response without invoke for {t}"));
                };
                if &op.object != object || op.response.is_some() {
                    return Serializability::Unchecked(format!("unpaired response for {t}"));
                }
                op.response = Some(payload.clone());
            }
            _ => {}
        }
    }
    let mut txns: Vec<TxnId> = commit.keys().copied().collect();
    txns.sort_by_key(|t| commit[t]);
    if txns.len() > SERIALIZABILITY_BOUND {
        return Serializability::Unchecked(format!(
            "{} committed transactions exceed the bound of {SERIALIZABILITY_BOUND}",
            txns.len()
        ));
    }
    for t in &txns {
        for op in ops.get(t).into_iter().flatten() {
            if !defs.contains_key(&op.object) {
                return Serializability::Unchecked(format!("no initial state for `{}`", op.object));
            }
            if op.response.is_none() {
                return Serializability::Unchecked(format!("{t}: operation on `{}` has no response", op.object));
            }
        }
    }
    let preds = txns
        .iter()
        .map(|t| {
            let b = begin.get(t).copied().unwrap_or(0);
            txns.iter()
                .enumerate()
                .filter(|(_, u)| commit[*u] < b)
                .map(|(j, _)| j)
                .collect()
        })
        .collect();
    let replay = Replay {
        ops: txns.iter().map(|t| ops.get(t).cloned().unwrap_or_default()).collect(),
        txns,
        preds,
        defs: &defs,
        finals: &finals,
    };
    let mut placed = Vec::new();
    let mut used = vec![false; replay.txns.len()];
    if replay.search(&initial, &mut placed, &mut used) {
        Serializability::Serializable(placed.iter().map(|i| replay.txns[*i]).collect())
    } else {
        Serializability::NotSerializable
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AbortReport {
    pub transactions: usize,
    pub committed: usize,
    pub manual: usize,
    pub forced: usize,
    /// Connected components of the shared-object graph.
    pub conflict_groups: usize,
    pub violations: Vec<String>,
}

impl AbortReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Counts outcomes and checks that forced aborts only follow manual ones
/// and that every conflict group keeps at least one transaction that was
/// not forcibly aborted.
pub fn check_abort_accounting(history: &History) -> AbortReport {
    let mut index: BTreeMap<TxnId, usize> = BTreeMap::new();
    let mut outcome: Vec<Option<Result<(), AbortCause>>> = Vec::new();
    let mut touched: BTreeMap<ObjectId, Vec<usize>> = BTreeMap::new();
    for e in &history.events {
        let Some(t) = e.txn else { continue };
        let next = index.len();
        let i = *index.entry(t).or_insert(next);
        if i == outcome.len() {
            outcome.push(None);
        }
        match &e.kind {
            EventKind::Commit => outcome[i] = Some(Ok(())),
            EventKind::Abort { cause } => outcome[i] = Some(Err(*cause)),
            _ => {
                if let Some(obj) = e.object() {
                    touched.entry(obj.clone()).or_default().push(i);
                }
            }
        }
    }
    let n = outcome.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for members in touched.values() {
        for w in members.windows(2) {
            let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
            parent[a] = b;
        }
    }
    let mut report = AbortReport {
        transactions: n,
        ..AbortReport::default()
    };
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(i);
        match outcome[i] {
            Some(Ok(())) => report.committed += 1,
            Some(Err(AbortCause::Manual)) => report.manual += 1,
            Some(Err(AbortCause::Forced)) => report.forced += 1,
            None => {}
        }
    }
    report.conflict_groups = groups.len();
    if report.manual == 0 && report.forced > 0 {
        report
            .violations
            .push(format!("{} forced aborts without any manual abort", report.forced));
    }
    let names: BTreeMap<usize, TxnId> = index.iter().map(|(t, i)| (*i, *t)).collect();
    for members in groups.values() {
        let finished: Vec<usize> = members.iter().copied().filter(|i| outcome[*i].is_some()).collect();
        if !finished.is_empty()
            && finished
                .iter()
                .all(|i| outcome[*i] == Some(Err(AbortCause::Forced)))
        {
            let ids: Vec<String> = finished.iter().map(|i| names[i].to_string()).collect();
            report.violations.push(format!(
                "conflict group {{{}}} made no progress: every transaction was forcibly aborted",
                ids.join(", ")
            ));
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::{HistoryEvent, Recorder};
    use crate::object::OperationClass;

    fn x() -> ObjectId {
        ObjectId::new("x")
    }

    struct Script {
        rec: Recorder,
    }

    impl Script {
        fn new() -> Self {
            Script {
                rec: Recorder::default(),
            }
        }
        fn ev(&self, txn: Option<u64>, kind: EventKind) -> &Self {
            self.rec.record(None, txn.map(TxnId), kind);
            self
        }
        fn init(&self, obj: &str, v: i64) -> &Self {
            self.ev(
                None,
                EventKind::Init {
                    object: ObjectId::new(obj),
                    type_name: "cell".into(),
                    state: catalog::cell_state(v),
                },
            )
        }
        fn op(&self, t: u64, obj: &str, method: &str, args: Value, out: Value) -> &Self {
            let class = if method == "read" {
                OperationClass::Read
            } else {
                OperationClass::Write
            };
            self.ev(
                Some(t),
                EventKind::Invoke {
                    object: ObjectId::new(obj),
                    method: method.into(),
                    class,
                    args,
                },
            )
            .ev(
                Some(t),
                EventKind::Response {
                    object: ObjectId::new(obj),
                    payload: out,
                },
            )
        }
        fn access(&self, t: u64, pv: Version) -> &Self {
            self.ev(Some(t), EventKind::Access { object: x(), pv })
        }
        fn release(&self, t: u64, pv: Version) -> &Self {
            self.ev(Some(t), EventKind::Release { object: x(), pv })
        }
        fn begin(&self, t: u64) -> &Self {
            self.ev(Some(t), EventKind::Begin { irrevocable: false })
        }
        fn commit(&self, t: u64) -> &Self {
            self.ev(Some(t), EventKind::Commit)
        }
        fn abort(&self, t: u64, cause: AbortCause) -> &Self {
            self.ev(Some(t), EventKind::Abort { cause })
        }
        fn fin(&self, obj: &str, v: i64) -> &Self {
            self.ev(
                None,
                EventKind::Final {
                    object: ObjectId::new(obj),
                    state: catalog::cell_state(v),
                },
            )
        }
        fn history(&self) -> History {
            self.rec.snapshot()
        }
    }

    /// Two transactions on one cell in the access-control shape: the second
    /// reads only after the first commits.
    fn access_control() -> Script {
        let s = Script::new();
        s.init("x", 0)
            .begin(1)
            .begin(2)
            .access(1, 1)
            .op(1, "x", "write", Value::Int(1), Value::Unit)
            .release(1, 1)
            .commit(1)
            .access(2, 2)
            .op(2, "x", "read", Value::Unit, Value::Int(1))
            .release(2, 2)
            .commit(2)
            .fin("x", 1);
        s
    }

    #[test]
    fn access_control_history_is_clean() {
        let h = access_control().history();
        assert!(check_version_order(&h).is_empty());
        assert_eq!(
            check_serializable(&h),
            Serializability::Serializable(vec![TxnId(1), TxnId(2)])
        );
        let r = check_abort_accounting(&h);
        assert!(r.ok());
        assert_eq!((r.committed, r.manual, r.forced), (2, 0, 0));
    }

    #[test]
    fn swapped_accesses_are_one_violation() {
        let s = Script::new();
        s.access(2, 2).access(1, 1).release(1, 1).release(2, 2);
        let v = check_version_order(&s.history());
        assert_eq!(v.len(), 1, "{v:?}");
        assert!(matches!(v[0], VersionViolation::Premature { pv: 2, .. }));
    }

    #[test]
    fn regression_is_flagged() {
        let s = Script::new();
        s.access(1, 1).release(1, 1).access(2, 2).release(2, 2).access(9, 2);
        let v = check_version_order(&s.history());
        assert!(matches!(v[..], [VersionViolation::OutOfOrder { previous: 2, pv: 2, .. }]));
    }

    #[test]
    fn empty_history_passes_everything() {
        let h = History::default();
        assert!(check_version_order(&h).is_empty());
        assert_eq!(check_serializable(&h), Serializability::Serializable(vec![]));
        assert!(check_abort_accounting(&h).ok());
    }

    #[test]
    fn single_transaction_is_serializable() {
        let s = Script::new();
        s.init("x", 5)
            .begin(1)
            .op(1, "x", "read", Value::Unit, Value::Int(5))
            .commit(1);
        assert!(check_serializable(&s.history()).is_serializable());
    }

    #[test]
    fn lost_update_is_not_serializable() {
        // Both read 0 then write 1: no serial order explains both reads.
        let s = Script::new();
        s.init("x", 0)
            .begin(1)
            .begin(2)
            .op(1, "x", "read", Value::Unit, Value::Int(0))
            .op(2, "x", "read", Value::Unit, Value::Int(0))
            .op(1, "x", "write", Value::Int(1), Value::Unit)
            .op(2, "x", "write", Value::Int(1), Value::Unit)
            .commit(1)
            .commit(2)
            .fin("x", 1);
        assert_eq!(check_serializable(&s.history()), Serializability::NotSerializable);
    }

    #[test]
    fn real_time_order_is_respected() {
        // T2 begins after T1 commits yet reads the initial value.
        let s = Script::new();
        s.init("x", 0)
            .begin(1)
            .op(1, "x", "write", Value::Int(1), Value::Unit)
            .commit(1)
            .begin(2)
            .op(2, "x", "read", Value::Unit, Value::Int(0))
            .commit(2);
        assert_eq!(check_serializable(&s.history()), Serializability::NotSerializable);
    }

    #[test]
    fn final_state_must_match() {
        let s = Script::new();
        s.init("x", 0)
            .begin(1)
            .op(1, "x", "write", Value::Int(1), Value::Unit)
            .commit(1)
            .fin("x", 7);
        assert_eq!(check_serializable(&s.history()), Serializability::NotSerializable);
    }

    #[test]
    fn aborted_effects_must_not_survive() {
        let s = Script::new();
        s.init("x", 0)
            .begin(1)
            .op(1, "x", "write", Value::Int(4), Value::Unit)
            .abort(1, AbortCause::Manual)
            .fin("x", 4);
        assert_eq!(check_serializable(&s.history()), Serializability::NotSerializable);
    }

    #[test]
    fn bound_exceeded_is_unchecked() {
        let s = Script::new();
        s.init("x", 0);
        for t in 1..=8 {
            s.begin(t).op(t, "x", "read", Value::Unit, Value::Int(0)).commit(t);
        }
        assert!(matches!(check_serializable(&s.history()), Serializability::Unchecked(_)));
    }

    #[test]
    fn unknown_type_is_unchecked() {
        let s = Script::new();
        s.ev(
            None,
            EventKind::Init {
                object: x(),
                type_name: "mystery".into(),
                state: State::new(),
            },
        );
        assert!(matches!(check_serializable(&s.history()), Serializability::Unchecked(_)));
    }

    #[test]
    fn cascade_accounting() {
        let s = Script::new();
        s.begin(1)
            .begin(2)
            .access(1, 1)
            .release(1, 1)
            .access(2, 2)
            .abort(1, AbortCause::Manual)
            .abort(2, AbortCause::Forced);
        let r = check_abort_accounting(&s.history());
        assert_eq!((r.manual, r.forced, r.conflict_groups), (1, 1, 1));
        assert!(r.ok(), "{:?}", r.violations);
    }

    #[test]
    fn forced_without_manual_is_flagged() {
        let s = Script::new();
        s.begin(1).access(1, 1).abort(1, AbortCause::Forced);
        let r = check_abort_accounting(&s.history());
        assert_eq!(r.violations.len(), 2);
    }

    #[test]
    fn group_of_only_forced_aborts_is_flagged() {
        let s = Script::new();
        s.begin(1)
            .access(1, 1)
            .abort(1, AbortCause::Forced)
            .begin(2)
            .access(2, 2)
            .abort(2, AbortCause::Forced)
            .begin(3)
            .ev(Some(3), EventKind::Access { object: ObjectId::new("z"), pv: 1 })
            .abort(3, AbortCause::Manual);
        let r = check_abort_accounting(&s.history());
        assert_eq!(r.conflict_groups, 2);
        assert_eq!(r.violations.len(), 1, "{:?}", r.violations);
    }

    #[test]
    fn events_are_json_lines() {
        let h = access_control().history();
        let line = serde_json::to_string(&h.events[1]).unwrap();
        let back: HistoryEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(back, h.events[1]);
    }
}
