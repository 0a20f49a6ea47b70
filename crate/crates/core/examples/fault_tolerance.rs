//! A client stops sending heartbeats while holding an object. The node
//! rolls its transaction back after the lease expires, a successor commits,
//! and the stalled client is forced to abort when it wakes up.

use std::time::{Duration, Instant};

use optsva::client::{ClientConfig, TxnError};
use optsva::cluster::Cluster;
use optsva::engine::Algorithm;
use optsva::node::NodeConfig;
use optsva::object::catalog;

fn main() {
    let lease = Duration::from_millis(300);
    let cluster = Cluster::in_process(
        1,
        NodeConfig {
            lease_timeout: Some(lease),
            ..NodeConfig::default()
        },
        None,
    );
    cluster.register(0, "x", catalog::counter(), catalog::counter_state(0)).unwrap();
    let config = |id| ClientConfig {
        id,
        algorithm: Algorithm::OptsvaCf,
        heartbeat: Some(Duration::from_millis(50)),
        ..ClientConfig::default()
    };

    let stalled = cluster.client_with(config(1));
    let mut t = stalled.transaction();
    let x = t.updates("x", None).unwrap();
    let mut held = t.begin().unwrap();
    held.invoke(&x, "increment", ()).unwrap();
    stalled.pause_heartbeats(true);
    println!("client 1 holds x and went silent");

    let successor = cluster.client_with(config(2));
    let started = Instant::now();
    let mut t = successor.transaction();
    let x2 = t.updates("x", Some(1)).unwrap();
    let report = t.start(|tx| tx.invoke(&x2, "increment", ())).unwrap();
    println!("client 2: {:?} after {:.0?}", report.outcome, started.elapsed());

    stalled.pause_heartbeats(false);
    match held.invoke(&x, "increment", ()) {
        Err(TxnError::Forced(why)) => println!("client 1 resumed and was forced to abort: {why}"),
        other => println!("client 1 resumed: {other:?}"),
    }
    held.force_abort();
    println!("final x = {:?}", cluster.state_of("x").unwrap().get("value"));
}
