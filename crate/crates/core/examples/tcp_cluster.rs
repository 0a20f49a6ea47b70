//! Two nodes served over TCP on loopback and a client talking to both.

use std::sync::Arc;

use optsva::client::{Client, ClientConfig};
use optsva::engine::Algorithm;
use optsva::ids::NodeId;
use optsva::node::{Node, NodeConfig};
use optsva::object::catalog;
use optsva::transport::{TcpServer, TcpTransport};

fn main() {
    let servers: Vec<TcpServer> = (0..2)
        .map(|i| {
            let node = Node::new(NodeId(i), NodeConfig::default(), None);
            node.register(format!("acct-{i}"), catalog::account(), catalog::account_state(50))
                .unwrap();
            TcpServer::bind("127.0.0.1:0", node).unwrap()
        })
        .collect();
    for (i, s) in servers.iter().enumerate() {
        println!("node {i} listening on {}", s.local_addr());
    }
    let transport = TcpTransport::new(servers.iter().enumerate().map(|(i, s)| (NodeId(i as u32), s.local_addr())));
    let client = Client::new(
        Arc::new(transport),
        ClientConfig {
            id: 1,
            algorithm: Algorithm::OptsvaCf,
            ..ClientConfig::default()
        },
    );
    let mut t = client.transaction();
    let a = t.accesses("acct-0", Some(1), Some(0), Some(1)).unwrap();
    let b = t.accesses("acct-1", Some(1), Some(0), Some(1)).unwrap();
    let report = t
        .start(|tx| {
            tx.invoke(&a, "withdraw", 20)?;
            tx.invoke(&b, "deposit", 20)?;
            Ok((tx.invoke(&a, "balance", ())?, tx.invoke(&b, "balance", ())?))
        })
        .unwrap();
    println!("{:?} after {} attempt(s)", report.outcome, report.attempts);
}
