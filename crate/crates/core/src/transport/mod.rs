//! Requests between clients and home nodes, and the transports that carry
//! them.
//!
//! Every request is answered by exactly one reply or one fault. The
//! in-process transport and the TCP transport both encode messages into the
//! same frames and hand them to [`Node::handle`](crate::node::Node::handle).

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::engine::{Algorithm, LockMode};
use crate::ids::{NodeId, ObjectId, TxnId, Version};
use crate::object::Interface;
use crate::value::Value;
use crate::versioning::Suprema;

pub mod inproc;
pub mod tcp;
pub mod wire;

pub use inproc::InProcTransport;
pub use tcp::{TcpServer, TcpTransport};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Declaration {
    pub object: ObjectId,
    pub suprema: Suprema,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Request {
    Locate {
        object: ObjectId,
    },
    /// Takes version locks (versioning algorithms) or object locks (lock
    /// baselines) on the listed objects, in the order given. `global` takes
    /// the node's global lock instead.
    Acquire {
        txn: TxnId,
        algorithm: Algorithm,
        objects: Vec<(ObjectId, LockMode)>,
        global: bool,
    },
    /// Grants private versions for the declared objects and creates one
    /// proxy per object.
    OpenProxy {
        txn: TxnId,
        algorithm: Algorithm,
        irrevocable: bool,
        declarations: Vec<Declaration>,
    },
    Invoke {
        txn: TxnId,
        object: ObjectId,
        method: String,
        args: Value,
    },
    /// Waits for the commit condition on every object of the transaction on
    /// this node and reports whether the transaction is doomed.
    Prepare {
        txn: TxnId,
    },
    /// Commits, or aborts and rolls back, the transaction on this node.
    Finalize {
        txn: TxnId,
        commit: bool,
    },
    Heartbeat {
        txns: Vec<TxnId>,
    },
}

impl Request {
    pub fn txn(&self) -> Option<TxnId> {
        match self {
            Request::Locate { .. } | Request::Heartbeat { .. } => None,
            Request::Acquire { txn, .. }
            | Request::OpenProxy { txn, .. }
            | Request::Invoke { txn, .. }
            | Request::Prepare { txn }
            | Request::Finalize { txn, .. } => Some(*txn),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyHandle {
    pub proxy_id: u64,
    pub txn: TxnId,
    pub object: ObjectId,
    pub pv: Option<Version>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Response {
    Located { node: NodeId, interface: Interface },
    Acquired,
    Opened { proxies: Vec<ProxyHandle> },
    Value(Value),
    Prepared { doomed: bool },
    Finalized,
    Ack,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
pub enum Fault {
    #[error("unknown object `{0}`")]
    UnknownObject(ObjectId),
    #[error("object `{0}` already registered")]
    DuplicateObject(ObjectId),
    #[error("no proxy for {txn} on `{object}`")]
    NoProxy { txn: TxnId, object: ObjectId },
    #[error("{txn} exceeded its declared bound on `{object}`")]
    SupremumExceeded { txn: TxnId, object: ObjectId },
    #[error("{0} must abort: it consumed state invalidated by an aborted transaction")]
    Doomed(TxnId),
    #[error("{0} was rolled back after its lease expired")]
    RolledBack(TxnId),
    #[error("method failed: {0}")]
    Method(String),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl Fault {
    /// Faults that end the transaction with a forced abort.
    pub fn forces_abort(&self) -> bool {
        matches!(
            self,
            Fault::SupremumExceeded { .. } | Fault::Doomed(_) | Fault::RolledBack(_) | Fault::Method(_)
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum CallError {
    #[error(transparent)]
    Fault(#[from] Fault),
    #[error("transport: {0}")]
    Transport(String),
}

impl CallError {
    pub fn forces_abort(&self) -> bool {
        match self {
            CallError::Fault(f) => f.forces_abort(),
            CallError::Transport(_) => false,
        }
    }
}

pub type CallResult = Result<Response, CallError>;

/// Carries requests to home nodes.
pub trait Transport: Send + Sync {
    fn call(&self, node: NodeId, request: Request) -> CallResult;
    fn nodes(&self) -> Vec<NodeId>;
}

impl fmt::Debug for dyn Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Transport").field("nodes", &self.nodes()).finish()
    }
}
