//! A set of nodes in one process wired to an in-process transport.

use std::sync::Arc;

use crate::client::{Client, ClientConfig};
use crate::engine::Algorithm;
use crate::history::{History, Recorder};
use crate::ids::{NodeId, ObjectId};
use crate::node::{Node, NodeConfig};
use crate::object::SharedObjectDef;
use crate::transport::{Fault, InProcTransport, Transport};
use crate::value::State;

pub struct Cluster {
    pub nodes: Vec<Arc<Node>>,
    pub transport: Arc<InProcTransport>,
    pub recorder: Option<Arc<Recorder>>,
}

impl Cluster {
    /// `n` nodes with ids `0..n`.
    pub fn in_process(n: usize, config: NodeConfig, recorder: Option<Arc<Recorder>>) -> Cluster {
        let nodes: Vec<Arc<Node>> = (0..n)
            .map(|i| Node::new(NodeId(i as u32), config.clone(), recorder.clone()))
            .collect();
        Cluster {
            transport: Arc::new(InProcTransport::new(nodes.iter().cloned())),
            nodes,
            recorder,
        }
    }

    /// A recorded cluster with leases disabled, for scripted runs.
    pub fn recorded(n: usize) -> Cluster {
        Cluster::in_process(
            n,
            NodeConfig {
                lease_timeout: None,
                ..NodeConfig::default()
            },
            Some(Arc::new(Recorder::default())),
        )
    }

    pub fn node(&self, index: usize) -> &Arc<Node> {
        &self.nodes[index]
    }

    pub fn register(
        &self,
        node: usize,
        id: impl Into<ObjectId>,
        def: SharedObjectDef,
        state: State,
    ) -> Result<(), Fault> {
        self.nodes[node].register(id, def, state)
    }

    /// A client without heartbeats that records into the cluster's history.
    pub fn client(&self, id: u32, algorithm: Algorithm) -> Client {
        self.client_with(ClientConfig {
            id,
            algorithm,
            heartbeat: None,
            ..ClientConfig::default()
        })
    }

    pub fn client_with(&self, config: ClientConfig) -> Client {
        let transport: Arc<dyn Transport> = self.transport.clone();
        let client = Client::new(transport, config);
        match &self.recorder {
            Some(r) => client.with_recorder(Arc::clone(r)),
            None => client,
        }
    }

    /// Current state of an object on whichever node hosts it.
    pub fn state_of(&self, id: impl Into<ObjectId>) -> Option<State> {
        let id = id.into();
        self.nodes.iter().find_map(|n| n.state_of(&id))
    }

    /// Records final states and returns the history so far.
    pub fn finish(&self) -> History {
        for n in &self.nodes {
            n.record_final_states();
        }
        self.history()
    }

    pub fn history(&self) -> History {
        self.recorder.as_ref().map(|r| r.snapshot()).unwrap_or_default()
    }
}
