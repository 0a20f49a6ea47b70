//! Operation handling for OptSVA-CF at an object's home node.
//!
//! Reads of objects declared read-only are served from a copy taken by a
//! prefetch task as soon as the object becomes accessible. Writes that come
//! before any read or update go to a log buffer, and the last of them hands
//! the log to a task that applies it and releases the object while the
//! transaction carries on. Reads and updates run on the live object; the
//! object is released as soon as the declared bounds say no further write
//! or update can come.

use std::sync::atomic::Ordering;
use std::sync::{Arc, Mutex};

use crate::engine::{lock, Consumption, HostedObject, Proxy, ProxyState, Sink, TaskOutput, TxnShared};
use crate::executor::{ConditionTask, Executor, TaskError};
use crate::history::EventKind;
use crate::ids::{TxnId, Version};
use crate::object::{buffer_invoke, checkpoint, log_apply, log_record, LogBuffer, ObjectError, OperationClass};
use crate::transport::Fault;
use crate::value::Value;
use crate::versioning::Condition;

pub(crate) fn method_fault(e: ObjectError) -> Fault {
    Fault::Method(e.to_string())
}

/// Notes that `ts` consumed the object's current state. Call with the
/// object's state lock held.
pub(crate) fn consume(sink: &Sink, ts: &TxnShared, obj: &Arc<HostedObject>, pv: Version) {
    let dependency_lv = obj.version.counters().lv;
    let epoch = lock(&obj.recovery).epoch;
    lock(&ts.consumptions).insert(
        obj.id.clone(),
        (
            Arc::clone(obj),
            Consumption {
                pv,
                dependency_lv,
                epoch,
            },
        ),
    );
    sink.record(
        ts.id,
        EventKind::Access {
            object: obj.id.clone(),
            pv,
        },
    );
}

/// True once some object `ts` consumed on this node was invalidated by an
/// earlier transaction's abort after the consumption.
pub(crate) fn is_doomed(ts: &TxnShared) -> bool {
    if ts.doomed.load(Ordering::SeqCst) {
        return true;
    }
    let consumed: Vec<(Arc<HostedObject>, Consumption)> = lock(&ts.consumptions).values().cloned().collect();
    for (obj, c) in consumed {
        let tainted = lock(&obj.recovery).records.iter().any(|r| {
            r.invalidated && r.aborter_pv < c.pv && c.dependency_lv >= r.aborter_pv && c.epoch < r.epoch
        });
        if tainted {
            ts.doomed.store(true, Ordering::SeqCst);
            return true;
        }
    }
    false
}

/// Waits for the access condition (the termination condition for
/// irrevocable transactions). Ends early if the transaction is doomed or
/// rolled back meanwhile.
pub(crate) fn await_access(
    ts: &TxnShared,
    obj: &HostedObject,
    pv: Version,
    irrevocable: bool,
) -> Result<(), Fault> {
    obj.version
        .await_condition(Condition::access_for(pv, irrevocable), &|| {
            ts.is_rolled_back() || is_doomed(ts)
        })
        .map_err(|_| {
            if ts.is_rolled_back() {
                Fault::RolledBack(ts.id)
            } else {
                Fault::Doomed(ts.id)
            }
        })
}

pub(crate) fn release_object(sink: &Sink, txn: TxnId, obj: &HostedObject, pv: Version) -> Result<(), Fault> {
    sink.record(
        txn,
        EventKind::Release {
            object: obj.id.clone(),
            pv,
        },
    );
    obj.version
        .release(pv)
        .map_err(|e| Fault::Protocol(e.to_string()))
}

fn task_error(e: impl std::fmt::Display) -> TaskError {
    TaskError::Failed(e.to_string())
}

/// Submits the read-only prefetch: once accessible, copy the object into
/// the transaction's buffer and release it.
pub(crate) fn submit_prefetch(sink: &Sink, executor: &Executor, ts: &Arc<TxnShared>, proxy: &Proxy, p: &mut ProxyState) {
    let pv = p.pv.expect("versioned proxy has a private version");
    let output = Arc::new(Mutex::new(TaskOutput::default()));
    let (sink2, ts2, obj, out) = (sink.clone(), Arc::clone(ts), Arc::clone(&proxy.object), Arc::clone(&output));
    let handle = executor.submit(ConditionTask::new(
        ts.id,
        Arc::clone(&proxy.object.version),
        Condition::access_for(pv, p.irrevocable),
        move || {
            let buf = {
                let state = lock(&obj.state);
                consume(&sink2, &ts2, &obj, pv);
                checkpoint(&obj.id, &state, pv).map_err(task_error)?
            };
            lock(&out).buf = Some(buf);
            release_object(&sink2, ts2.id, &obj, pv).map_err(task_error)
        },
    ));
    p.pending = Some((handle, output));
    p.released = true;
}

/// Submits the tail of the last write: once accessible, checkpoint the
/// object, apply the log, copy the result for later reads and release.
fn submit_last_write(sink: &Sink, executor: &Executor, ts: &Arc<TxnShared>, proxy: &Proxy, p: &mut ProxyState) {
    let pv = p.pv.expect("versioned proxy has a private version");
    let mut log = std::mem::replace(&mut p.log, LogBuffer::new(proxy.object.id.clone()));
    let output = Arc::new(Mutex::new(TaskOutput::default()));
    let (sink2, ts2, obj, out) = (sink.clone(), Arc::clone(ts), Arc::clone(&proxy.object), Arc::clone(&output));
    let handle = executor.submit(ConditionTask::new(
        ts.id,
        Arc::clone(&proxy.object.version),
        Condition::access_for(pv, p.irrevocable),
        move || {
            {
                let mut state = lock(&obj.state);
                consume(&sink2, &ts2, &obj, pv);
                let stored = checkpoint(&obj.id, &state, pv).map_err(task_error)?;
                {
                    let mut o = lock(&out);
                    o.stored = Some(stored);
                    o.modified = true;
                }
                log_apply(&obj.def, &obj.id, &mut state, &mut log).map_err(task_error)?;
                let buf = checkpoint(&obj.id, &state, pv).map_err(task_error)?;
                lock(&out).buf = Some(buf);
            }
            release_object(&sink2, ts2.id, &obj, pv).map_err(task_error)
        },
    ));
    p.pending = Some((handle, output));
    p.released = true;
}

/// First direct access: wait, checkpoint, and bring in any logged writes.
fn ensure_access(sink: &Sink, ts: &TxnShared, obj: &Arc<HostedObject>, p: &mut ProxyState) -> Result<(), Fault> {
    if p.accessed {
        return Ok(());
    }
    let pv = p.pv.expect("versioned proxy has a private version");
    await_access(ts, obj, pv, p.irrevocable)?;
    let mut state = lock(&obj.state);
    consume(sink, ts, obj, pv);
    p.stored = Some(checkpoint(&obj.id, &state, pv).map_err(method_fault)?);
    p.accessed = true;
    if !p.log.is_empty() {
        p.modified = true;
        log_apply(&obj.def, &obj.id, &mut state, &mut p.log).map_err(method_fault)?;
    }
    Ok(())
}

/// Releases the object once no further write or update can come.
fn release_if_done(sink: &Sink, txn: TxnId, obj: &HostedObject, p: &mut ProxyState) -> Result<(), Fault> {
    if p.released {
        return Ok(());
    }
    let all_done = p.suprema.ub().reached_by(p.cc());
    let writes_done = p.wc() > 0 && p.suprema.wub().reached_by(p.wc());
    if !(all_done || writes_done) {
        return Ok(());
    }
    let pv = p.pv.expect("versioned proxy has a private version");
    p.buf = Some(checkpoint(&obj.id, &lock(&obj.state), pv).map_err(method_fault)?);
    release_object(sink, txn, obj, pv)?;
    p.released = true;
    Ok(())
}

pub(crate) fn invoke(
    sink: &Sink,
    executor: &Executor,
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
    if class == OperationClass::Read && (p.read_only || p.released) {
        p.join_pending().map_err(Fault::Method)?;
        if is_doomed(ts) {
            return Err(Fault::Doomed(ts.id));
        }
        let buf = p
            .buf
            .as_ref()
            .ok_or_else(|| Fault::Protocol(format!("no buffered copy of `{}`", obj.id)))?;
        let out = buffer_invoke(&obj.def, buf, method, args).map_err(method_fault)?;
        p.count(class);
        return Ok(out);
    }
    if p.released {
        return Err(Fault::SupremumExceeded {
            txn: ts.id,
            object: obj.id.clone(),
        });
    }
    if class == OperationClass::Write && !p.accessed {
        let out = log_record(&obj.def, &mut p.log, method, args).map_err(method_fault)?;
        p.count(class);
        if p.suprema.wub().reached_by(p.wc()) {
            submit_last_write(sink, executor, ts, proxy, &mut p);
        }
        return Ok(out);
    }
    ensure_access(sink, ts, obj, &mut p)?;
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
    release_if_done(sink, ts.id, obj, &mut p)?;
    Ok(out)
}

/// Commit-time work on one object: wait for outstanding tasks and the
/// termination condition, then bring in writes that were only logged.
pub(crate) fn prepare_object(sink: &Sink, ts: &TxnShared, proxy: &Proxy) -> Result<(), String> {
    let obj = &proxy.object;
    let mut p = lock(&proxy.state);
    p.join_pending()?;
    let pv = p.pv.expect("versioned proxy has a private version");
    obj.version.await_uncancellable(Condition::Termination(pv));
    if p.accessed || p.released {
        return Ok(());
    }
    let mut state = lock(&obj.state);
    if p.log.is_empty() {
        p.stored = Some(checkpoint(&obj.id, &state, pv).map_err(|e| e.to_string())?);
    } else {
        consume(sink, ts, obj, pv);
        p.stored = Some(checkpoint(&obj.id, &state, pv).map_err(|e| e.to_string())?);
        p.modified = true;
        log_apply(&obj.def, &obj.id, &mut state, &mut p.log).map_err(|e| e.to_string())?;
    }
    p.accessed = true;
    Ok(())
}
