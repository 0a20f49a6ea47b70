//! Shared objects with classified methods, plus the copy and log buffers
//! that let writes and post-release reads run without touching the live
//! object.
//!
//! Every method carries exactly one [`OperationClass`]. Bodies see the object
//! through a [`StateView`] whose permissions follow that class: a read body
//! cannot assign, a write body cannot look at prior state. A write body may
//! therefore run against a detached view inside a [`LogBuffer`], recording
//! its field assignments as an effect that is replayed later onto the real
//! object.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::ids::{ObjectId, Version};
use crate::value::{deep_copy, CodecError, State, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OperationClass {
    Read,
    Write,
    Update,
}

impl fmt::Display for OperationClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OperationClass::Read => "READ",
            OperationClass::Write => "WRITE",
            OperationClass::Update => "UPDATE",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BodyError {
    #[error("{class} body attempted to {attempted} object state")]
    Misclassified {
        class: OperationClass,
        attempted: &'static str,
    },
    #[error("method failed: {0}")]
    Failed(String),
}

#[derive(Debug, thiserror::Error)]
pub enum ObjectError {
    #[error("unknown method `{method}` on `{type_name}`")]
    UnknownMethod { type_name: String, method: String },
    #[error("method `{method}` is {actual}, expected {expected}")]
    WrongClass {
        method: String,
        expected: OperationClass,
        actual: OperationClass,
    },
    #[error("buffer for `{buffer}` applied to `{object}`")]
    IdMismatch { buffer: ObjectId, object: ObjectId },
    #[error("method `{method}`: {source}")]
    Body {
        method: String,
        #[source]
        source: BodyError,
    },
    #[error("checkpoint failed: {0}")]
    Checkpoint(#[from] CodecError),
}

impl ObjectError {
    pub fn is_misclassification(&self) -> bool {
        matches!(
            self,
            ObjectError::Body {
                source: BodyError::Misclassified { .. },
                ..
            }
        )
    }
}

enum Target<'a> {
    Shared(&'a State),
    Live(&'a mut State),
    Detached(&'a mut Vec<(String, Value)>),
}

/// What a method body sees of its object.
pub struct StateView<'a> {
    class: OperationClass,
    target: Target<'a>,
}

impl<'a> StateView<'a> {
    fn shared(state: &'a State) -> Self {
        StateView {
            class: OperationClass::Read,
            target: Target::Shared(state),
        }
    }

    fn live(class: OperationClass, state: &'a mut State) -> Self {
        StateView {
            class,
            target: Target::Live(state),
        }
    }

    fn detached(effects: &'a mut Vec<(String, Value)>) -> Self {
        StateView {
            class: OperationClass::Write,
            target: Target::Detached(effects),
        }
    }

    pub fn class(&self) -> OperationClass {
        self.class
    }

    /// Reads a field. Missing fields read as `Unit`. Write bodies get a
    /// poisoned view and fail here.
    pub fn get(&self, field: &str) -> Result<Value, BodyError> {
        if self.class == OperationClass::Write {
            return Err(BodyError::Misclassified {
                class: self.class,
                attempted: "read",
            });
        }
        let state = match &self.target {
            Target::Shared(s) => &**s,
            Target::Live(s) => &**s,
            Target::Detached(_) => unreachable!("detached views are write-only"),
        };
        Ok(state.get(field).cloned().unwrap_or_default())
    }

    pub fn get_int(&self, field: &str) -> Result<i64, BodyError> {
        match self.get(field)? {
            Value::Int(v) => Ok(v),
            Value::Unit => Ok(0),
            other => Err(BodyError::Failed(format!(
                "field `{field}` holds {other}, expected an integer"
            ))),
        }
    }

    pub fn set(&mut self, field: &str, value: Value) -> Result<(), BodyError> {
        match &mut self.target {
            Target::Shared(_) => Err(BodyError::Misclassified {
                class: self.class,
                attempted: "modify",
            }),
            Target::Live(s) => {
                s.set(field, value);
                Ok(())
            }
            Target::Detached(effects) => {
                effects.push((field.to_string(), value));
                Ok(())
            }
        }
    }
}

pub type MethodBody =
    Arc<dyn Fn(&mut StateView<'_>, &Value) -> Result<Value, BodyError> + Send + Sync>;

#[derive(Clone)]
pub struct MethodDef {
    pub class: OperationClass,
    pub body: MethodBody,
    /// Write bodies run eagerly on the log buffer unless the author opts out;
    /// non-eager entries execute when the log is applied.
    pub eager: bool,
}

impl fmt::Debug for MethodDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MethodDef")
            .field("class", &self.class)
            .field("eager", &self.eager)
            .finish_non_exhaustive()
    }
}

/// The interface and method bodies of a shared object type.
#[derive(Clone, Debug)]
pub struct SharedObjectDef {
    type_name: String,
    methods: BTreeMap<String, MethodDef>,
}

/// Client-visible part of a definition: method names and their classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interface {
    pub type_name: String,
    pub classes: BTreeMap<String, OperationClass>,
}

impl Interface {
    pub fn class_of(&self, method: &str) -> Option<OperationClass> {
        self.classes.get(method).copied()
    }
}

pub struct DefBuilder {
    def: SharedObjectDef,
}

impl DefBuilder {
    fn method<F>(mut self, name: &str, class: OperationClass, eager: bool, body: F) -> Self
    where
        F: Fn(&mut StateView<'_>, &Value) -> Result<Value, BodyError> + Send + Sync + 'static,
    {
        self.def.methods.insert(
            name.to_string(),
            MethodDef {
                class,
                body: Arc::new(body),
                eager,
            },
        );
        self
    }

    pub fn read<F>(self, name: &str, body: F) -> Self
    where
        F: Fn(&mut StateView<'_>, &Value) -> Result<Value, BodyError> + Send + Sync + 'static,
    {
        self.method(name, OperationClass::Read, false, body)
    }

    pub fn write<F>(self, name: &str, body: F) -> Self
    where
        F: Fn(&mut StateView<'_>, &Value) -> Result<Value, BodyError> + Send + Sync + 'static,
    {
        self.method(name, OperationClass::Write, true, body)
    }

    /// A write whose body must run against the real object when the log is
    /// applied rather than on the log buffer.
    pub fn deferred_write<F>(self, name: &str, body: F) -> Self
    where
        F: Fn(&mut StateView<'_>, &Value) -> Result<Value, BodyError> + Send + Sync + 'static,
    {
        self.method(name, OperationClass::Write, false, body)
    }

    pub fn update<F>(self, name: &str, body: F) -> Self
    where
        F: Fn(&mut StateView<'_>, &Value) -> Result<Value, BodyError> + Send + Sync + 'static,
    {
        self.method(name, OperationClass::Update, false, body)
    }

    pub fn build(self) -> SharedObjectDef {
        self.def
    }
}

impl SharedObjectDef {
    pub fn builder(type_name: &str) -> DefBuilder {
        DefBuilder {
            def: SharedObjectDef {
                type_name: type_name.to_string(),
                methods: BTreeMap::new(),
            },
        }
    }

    pub fn type_name(&self) -> &str {
        &self.type_name
    }

    pub fn method(&self, name: &str) -> Result<&MethodDef, ObjectError> {
        self.methods
            .get(name)
            .ok_or_else(|| ObjectError::UnknownMethod {
                type_name: self.type_name.clone(),
                method: name.to_string(),
            })
    }

    pub fn interface(&self) -> Interface {
        Interface {
            type_name: self.type_name.clone(),
            classes: self
                .methods
                .iter()
                .map(|(name, m)| (name.clone(), m.class))
                .collect(),
        }
    }

    /// Runs a method on the live state with the view its class allows.
    pub fn invoke(&self, state: &mut State, method: &str, args: &Value) -> Result<Value, ObjectError> {
        let def = self.method(method)?;
        let out = if def.class == OperationClass::Read {
            (def.body)(&mut StateView::shared(state), args)
        } else {
            (def.body)(&mut StateView::live(def.class, state), args)
        };
        out.map_err(|source| ObjectError::Body {
            method: method.to_string(),
            source,
        })
    }
}

pub fn classify(def: &SharedObjectDef, method: &str) -> Result<OperationClass, ObjectError> {
    Ok(def.method(method)?.class)
}

/// Deep snapshot of an object's state, used for post-release reads (`buf`)
/// or for restoring the object on abort (`stored`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CopyBuffer {
    pub object_id: ObjectId,
    pub state: State,
    pub origin_pv: Version,
}

pub fn checkpoint(object_id: &ObjectId, state: &State, pv: Version) -> Result<CopyBuffer, ObjectError> {
    Ok(CopyBuffer {
        object_id: object_id.clone(),
        state: deep_copy(state)?,
        origin_pv: pv,
    })
}

pub fn restore(object_id: &ObjectId, state: &mut State, buffer: &CopyBuffer) -> Result<(), ObjectError> {
    if &buffer.object_id != object_id {
        return Err(ObjectError::IdMismatch {
            buffer: buffer.object_id.clone(),
            object: object_id.clone(),
        });
    }
    *state = deep_copy(&buffer.state)?;
    Ok(())
}

/// Executes a read method against a copy buffer. The buffer is not changed.
pub fn buffer_invoke(
    def: &SharedObjectDef,
    buffer: &CopyBuffer,
    method: &str,
    args: &Value,
) -> Result<Value, ObjectError> {
    let m = def.method(method)?;
    if m.class != OperationClass::Read {
        return Err(ObjectError::WrongClass {
            method: method.to_string(),
            expected: OperationClass::Read,
            actual: m.class,
        });
    }
    (m.body)(&mut StateView::shared(&buffer.state), args).map_err(|source| ObjectError::Body {
        method: method.to_string(),
        source,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogEntry {
    pub method: String,
    pub args: Value,
    /// Field assignments made when the body ran on the log buffer.
    pub effect: Option<Vec<(String, Value)>>,
}

/// Recorded write invocations on an object's interface, without its state.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LogBuffer {
    pub object_id: ObjectId,
    pub entries: Vec<LogEntry>,
}

impl LogBuffer {
    pub fn new(object_id: ObjectId) -> Self {
        LogBuffer {
            object_id,
            entries: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

pub fn log_record(
    def: &SharedObjectDef,
    log: &mut LogBuffer,
    method: &str,
    args: &Value,
) -> Result<Value, ObjectError> {
    let m = def.method(method)?;
    if m.class != OperationClass::Write {
        return Err(ObjectError::WrongClass {
            method: method.to_string(),
            expected: OperationClass::Write,
            actual: m.class,
        });
    }
    if !m.eager {
        log.entries.push(LogEntry {
            method: method.to_string(),
            args: args.clone(),
            effect: None,
        });
        return Ok(Value::Unit);
    }
    let mut effects = Vec::new();
    let out = (m.body)(&mut StateView::detached(&mut effects), args).map_err(|source| {
        ObjectError::Body {
            method: method.to_string(),
            source,
        }
    })?;
    log.entries.push(LogEntry {
        method: method.to_string(),
        args: args.clone(),
        effect: Some(effects),
    });
    Ok(out)
}

/// Applies and consumes the log: pre-executed entries replay their effects,
/// the rest execute on the live state now.
pub fn log_apply(
    def: &SharedObjectDef,
    object_id: &ObjectId,
    state: &mut State,
    log: &mut LogBuffer,
) -> Result<(), ObjectError> {
    if &log.object_id != object_id {
        return Err(ObjectError::IdMismatch {
            buffer: log.object_id.clone(),
            object: object_id.clone(),
        });
    }
    for entry in log.entries.drain(..) {
        match entry.effect {
            Some(effects) => {
                for (field, value) in effects {
                    state.set(&field, value);
                }
            }
            None => {
                def.invoke(state, &entry.method, &entry.args)?;
            }
        }
    }
    Ok(())
}

/// Object types shared by the bench driver, the examples and the history
/// checker's replay.
pub mod catalog {
    use std::thread;
    use std::time::Duration;

    use super::*;

    /// A reference cell: `read` returns the value, `write(v)` replaces it.
    pub fn cell(latency: Duration) -> SharedObjectDef {
        let pause = move || {
            if !latency.is_zero() {
                thread::sleep(latency);
            }
        };
        SharedObjectDef::builder("cell")
            .read("read", move |view, _| {
                pause();
                view.get("value")
            })
            .write("write", move |view, args| {
                pause();
                view.set("value", args.clone())?;
                Ok(Value::Unit)
            })
            .build()
    }

    pub fn cell_state(initial: i64) -> State {
        State::new().with("value", initial)
    }

    /// The bank account used throughout the examples.
    pub fn account() -> SharedObjectDef {
        fn amount(args: &Value) -> Result<i64, BodyError> {
            args.as_int()
                .ok_or_else(|| BodyError::Failed(format!("expected an integer amount, got {args}")))
        }
        SharedObjectDef::builder("account")
            .read("balance", |view, _| view.get("balance"))
            .update("deposit", |view, args| {
                let b = view.get_int("balance")?;
                view.set("balance", Value::Int(b + amount(args)?))?;
                Ok(Value::Unit)
            })
            .update("withdraw", |view, args| {
                let b = view.get_int("balance")?;
                view.set("balance", Value::Int(b - amount(args)?))?;
                Ok(Value::Unit)
            })
            .write("reset", |view, _| {
                view.set("balance", Value::Int(0))?;
                Ok(Value::Unit)
            })
            .build()
    }

    pub fn account_state(balance: i64) -> State {
        State::new().with("balance", balance)
    }

    /// An integer register with an increment update.
    pub fn counter() -> SharedObjectDef {
        SharedObjectDef::builder("counter")
            .read("get", |view, _| view.get("value"))
            .update("increment", |view, _| {
                let v = view.get_int("value")? + 1;
                view.set("value", Value::Int(v))?;
                Ok(Value::Int(v))
            })
            .write("set", |view, args| {
                view.set("value", args.clone())?;
                Ok(Value::Unit)
            })
            .build()
    }

    pub fn counter_state(initial: i64) -> State {
        State::new().with("value", initial)
    }

    /// Latency-free definition for a type name, used to replay histories.
    pub fn lookup(type_name: &str) -> Option<SharedObjectDef> {
        match type_name {
            "cell" => Some(cell(Duration::ZERO)),
            "account" => Some(account()),
            "counter" => Some(counter()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::catalog::*;
    use super::*;
    use proptest::prelude::*;
    use std::time::Duration;

    fn x() -> ObjectId {
        ObjectId::new("x")
    }

    #[test]
    fn classify_account_methods() {
        let def = account();
        assert_eq!(classify(&def, "balance").unwrap(), OperationClass::Read);
        assert_eq!(classify(&def, "deposit").unwrap(), OperationClass::Update);
        assert_eq!(classify(&def, "reset").unwrap(), OperationClass::Write);
        assert!(matches!(
            classify(&def, "transfer"),
            Err(ObjectError::UnknownMethod { .. })
        ));
    }

    #[test]
    fn checkpoint_of_cell() {
        let buf = checkpoint(&x(), &cell_state(0), 1).unwrap();
        assert_eq!(buf.state, cell_state(0));
        assert_eq!(buf.origin_pv, 1);
    }

    #[test]
    fn checkpoint_is_isolated_from_live_object() {
        let def = account();
        let mut live = account_state(100);
        let pre = live.clone();
        let mut buf = checkpoint(&x(), &live, 1).unwrap();
        def.invoke(&mut live, "withdraw", &Value::Int(100)).unwrap();
        assert_eq!(buf.state, pre);
        assert_eq!(live.get("balance"), Some(&Value::Int(0)));

        buf.state.set("balance", Value::Int(7));
        assert_eq!(live.get("balance"), Some(&Value::Int(0)));
    }

    #[test]
    fn restore_roundtrip_and_idempotence() {
        let def = account();
        let mut live = account_state(100);
        let buf = checkpoint(&x(), &live, 1).unwrap();
        def.invoke(&mut live, "deposit", &Value::Int(5)).unwrap();
        restore(&x(), &mut live, &buf).unwrap();
        assert_eq!(live, account_state(100));
        restore(&x(), &mut live, &buf).unwrap();
        assert_eq!(live, account_state(100));

        let mut empty = State::new();
        let eb = checkpoint(&x(), &State::new(), 1).unwrap();
        restore(&x(), &mut empty, &eb).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn restore_rejects_foreign_buffer() {
        let buf = checkpoint(&ObjectId::new("y"), &cell_state(1), 1).unwrap();
        let mut live = cell_state(0);
        assert!(matches!(
            restore(&x(), &mut live, &buf),
            Err(ObjectError::IdMismatch { .. })
        ));
    }

    #[test]
    fn log_records_writes_with_effects() {
        let def = cell(Duration::ZERO);
        let mut log = LogBuffer::new(x());
        let out = log_record(&def, &mut log, "write", &Value::Int(2)).unwrap();
        assert_eq!(out, Value::Unit);
        assert_eq!(
            log.entries[0].effect,
            Some(vec![("value".to_string(), Value::Int(2))])
        );
        log_record(&def, &mut log, "write", &Value::Int(3)).unwrap();
        assert_eq!(log.len(), 2);

        let mut live = cell_state(1);
        log_apply(&def, &x(), &mut live, &mut log).unwrap();
        assert_eq!(live.get("value"), Some(&Value::Int(3)));
        assert!(log.is_empty());
    }

    #[test]
    fn log_record_of_argumentless_write() {
        let def = account();
        let mut log = LogBuffer::new(x());
        log_record(&def, &mut log, "reset", &Value::Unit).unwrap();
        assert_eq!(log.entries[0].args, Value::Unit);
    }

    #[test]
    fn log_record_rejects_non_writes() {
        let def = account();
        let mut log = LogBuffer::new(x());
        assert!(matches!(
            log_record(&def, &mut log, "deposit", &Value::Int(1)),
            Err(ObjectError::WrongClass { .. })
        ));
    }

    #[test]
    fn misclassified_write_is_detected() {
        let def = SharedObjectDef::builder("bad")
            .write("sneaky", |view, _| {
                let v = view.get_int("value")?;
                view.set("value", Value::Int(v + 1))?;
                Ok(Value::Unit)
            })
            .build();
        let mut log = LogBuffer::new(x());
        let err = log_record(&def, &mut log, "sneaky", &Value::Unit).unwrap_err();
        assert!(err.is_misclassification());
        assert!(log.is_empty());
    }

    #[test]
    fn read_body_cannot_modify() {
        let def = SharedObjectDef::builder("bad")
            .read("sneaky", |view, _| {
                view.set("value", Value::Int(9))?;
                Ok(Value::Unit)
            })
            .build();
        let mut live = cell_state(0);
        let err = def.invoke(&mut live, "sneaky", &Value::Unit).unwrap_err();
        assert!(err.is_misclassification());
        assert_eq!(live, cell_state(0));
    }

    #[test]
    fn deferred_writes_run_at_apply() {
        let def = SharedObjectDef::builder("late")
            .deferred_write("put", |view, args| {
                view.set("value", args.clone())?;
                Ok(Value::Unit)
            })
            .build();
        let mut log = LogBuffer::new(x());
        log_record(&def, &mut log, "put", &Value::Int(4)).unwrap();
        assert_eq!(log.entries[0].effect, None);
        let mut live = cell_state(0);
        log_apply(&def, &x(), &mut live, &mut log).unwrap();
        assert_eq!(live.get("value"), Some(&Value::Int(4)));
    }

    #[test]
    fn empty_log_leaves_object_unchanged() {
        let def = cell(Duration::ZERO);
        let mut live = cell_state(5);
        log_apply(&def, &x(), &mut live, &mut LogBuffer::new(x())).unwrap();
        assert_eq!(live, cell_state(5));
    }

    #[test]
    fn buffered_reads() {
        let cdef = cell(Duration::ZERO);
        let buf = checkpoint(&x(), &cell_state(1), 2).unwrap();
        assert_eq!(buffer_invoke(&cdef, &buf, "read", &Value::Unit).unwrap(), Value::Int(1));
        assert_eq!(buffer_invoke(&cdef, &buf, "read", &Value::Unit).unwrap(), Value::Int(1));
        assert!(matches!(
            buffer_invoke(&cdef, &buf, "write", &Value::Int(3)),
            Err(ObjectError::WrongClass { .. })
        ));

        let adef = account();
        let mut live = account_state(100);
        let abuf = checkpoint(&x(), &live, 1).unwrap();
        let direct = adef.invoke(&mut live, "balance", &Value::Unit).unwrap();
        assert_eq!(buffer_invoke(&adef, &abuf, "balance", &Value::Unit).unwrap(), direct);
    }

    #[derive(Clone, Debug)]
    enum Op {
        Write(i64),
        Set(i64),
        Reset,
    }

    fn arb_ops() -> impl Strategy<Value = Vec<Op>> {
        prop::collection::vec(
            prop_oneof![
                any::<i64>().prop_map(Op::Write),
                any::<i64>().prop_map(Op::Set),
                Just(Op::Reset)
            ],
            0..12,
        )
    }

    fn mixed() -> SharedObjectDef {
        SharedObjectDef::builder("mixed")
            .write("write", |view, args| {
                view.set("a", args.clone())?;
                Ok(Value::Unit)
            })
            .deferred_write("set", |view, args| {
                view.set("b", args.clone())?;
                Ok(Value::Unit)
            })
            .write("reset", |view, _| {
                view.set("a", Value::Int(0))?;
                view.set("b", Value::Int(0))?;
                Ok(Value::Unit)
            })
            .read("both", |view, _| {
                Ok(Value::List(vec![view.get("a")?, view.get("b")?]))
            })
            .build()
    }

    proptest! {
        // Applying a log equals executing the same calls in order.
        #[test]
        fn log_apply_matches_sequential_execution(
            initial_a in any::<i64>(),
            initial_b in any::<i64>(),
            ops in arb_ops(),
        ) {
            let def = mixed();
            let start = State::new().with("a", initial_a).with("b", initial_b);

            let mut oracle = start.clone();
            for op in &ops {
                let (m, a) = match op {
                    Op::Write(v) => ("write", Value::Int(*v)),
                    Op::Set(v) => ("set", Value::Int(*v)),
                    Op::Reset => ("reset", Value::Unit),
                };
                def.invoke(&mut oracle, m, &a).unwrap();
            }

            let mut log = LogBuffer::new(x());
            for op in &ops {
                let (m, a) = match op {
                    Op::Write(v) => ("write", Value::Int(*v)),
                    Op::Set(v) => ("set", Value::Int(*v)),
                    Op::Reset => ("reset", Value::Unit),
                };
                log_record(&def, &mut log, m, &a).unwrap();
            }
            let mut live = start;
            log_apply(&def, &x(), &mut live, &mut log).unwrap();
            prop_assert_eq!(live, oracle);
        }

        #[test]
        fn buffered_and_direct_reads_agree(a in any::<i64>(), b in any::<i64>()) {
            let def = mixed();
            let mut live = State::new().with("a", a).with("b", b);
            let buf = checkpoint(&x(), &live, 1).unwrap();
            let direct = def.invoke(&mut live, "both", &Value::Unit).unwrap();
            prop_assert_eq!(buffer_invoke(&def, &buf, "both", &Value::Unit).unwrap(), direct);
        }
    }
}
