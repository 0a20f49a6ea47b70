//! Transport between threads of one process. Messages still go through the
//! frame codec so runs exercise the same encoding as TCP.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use crate::engine::lock;
use crate::ids::NodeId;
use crate::node::Node;
use crate::transport::wire::Frame;
use crate::transport::{CallError, CallResult, Request, Transport};

/// Frames seen by an in-process transport, in the order they were sent.
#[derive(Debug, Default)]
pub struct FrameTap {
    frames: Mutex<Vec<(NodeId, Frame)>>,
}

impl FrameTap {
    pub fn frames(&self) -> Vec<(NodeId, Frame)> {
        lock(&self.frames).clone()
    }
}

#[derive(Default)]
pub struct InProcTransport {
    nodes: BTreeMap<NodeId, Arc<Node>>,
    next: AtomicU64,
    tap: Option<Arc<FrameTap>>,
}

impl InProcTransport {
    pub fn new(nodes: impl IntoIterator<Item = Arc<Node>>) -> Self {
        InProcTransport {
            nodes: nodes.into_iter().map(|n| (n.id(), n)).collect(),
            next: AtomicU64::new(1),
            tap: None,
        }
    }

    /// Records every frame that crosses this transport.
    pub fn with_tap(mut self) -> (Self, Arc<FrameTap>) {
        let tap = Arc::new(FrameTap::default());
        self.tap = Some(Arc::clone(&tap));
        (self, tap)
    }

    pub fn node(&self, id: NodeId) -> Option<&Arc<Node>> {
        self.nodes.get(&id)
    }

    fn capture(&self, node: NodeId, frame: &Frame) {
        if let Some(tap) = &self.tap {
            lock(&tap.frames).push((node, frame.clone()));
        }
    }
}

impl Transport for InProcTransport {
    fn call(&self, node: NodeId, request: Request) -> CallResult {
        let target = self
            .nodes
            .get(&node)
            .ok_or_else(|| CallError::Transport(format!("no route to {node}")))?;
        let correlation = self.next.fetch_add(1, Ordering::Relaxed);
        let wire = |e: crate::transport::wire::WireError| CallError::Transport(e.to_string());
        let out = Frame::request(correlation, &request).map_err(wire)?;
        self.capture(node, &out);
        let received = Frame::from_bytes(&out.to_bytes()).map_err(wire)?;
        let result = target.handle(received.to_request().map_err(wire)?);
        let back = Frame::reply(received.correlation, &result).map_err(wire)?;
        self.capture(node, &back);
        let reply = Frame::from_bytes(&back.to_bytes()).map_err(wire)?;
        if reply.correlation != correlation {
            return Err(CallError::Transport("correlation mismatch".into()));
        }
        reply.to_reply().map_err(wire)?.map_err(CallError::Fault)
    }

    fn nodes(&self) -> Vec<NodeId> {
        self.nodes.keys().copied().collect()
    }
}
