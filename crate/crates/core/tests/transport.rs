use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use optsva::bench::config::TransportKind;
use optsva::bench::{run_benchmark, BenchConfig};
use optsva::client::{Client, ClientConfig, ClientError, Outcome, TxnError};
use optsva::cluster::Cluster;
use optsva::engine::{Algorithm, LockMode};
use optsva::history::check::{check_serializable, check_version_order};
use optsva::history::Recorder;
use optsva::ids::{NodeId, ObjectId, TxnId};
use optsva::node::{Node, NodeConfig};
use optsva::object::catalog;
use optsva::transport::wire::Kind;
use optsva::transport::{Declaration, InProcTransport, Request, Response, TcpServer, TcpTransport};
use optsva::value::Value;
use optsva::versioning::Suprema;

fn tcp_client(servers: &[TcpServer], id: u32, recorder: Option<Arc<Recorder>>) -> Client {
    let t = TcpTransport::new(servers.iter().enumerate().map(|(i, s)| (NodeId(i as u32), s.local_addr())));
    let c = Client::new(
        Arc::new(t),
        ClientConfig {
            id,
            algorithm: Algorithm::OptsvaCf,
            heartbeat: Some(Duration::from_millis(200)),
            ..ClientConfig::default()
        },
    );
    match recorder {
        Some(r) => c.with_recorder(r),
        None => c,
    }
}

#[test]
fn locate_finds_the_home_node_and_rejects_unknown_objects() {
    let c = Cluster::recorded(3);
    c.register(2, "x", catalog::account(), catalog::account_state(1)).unwrap();
    let client = c.client(1, Algorithm::OptsvaCf);
    let stub = client.locate("x").unwrap();
    assert_eq!(stub.node, NodeId(2));
    assert_eq!(stub.interface().type_name, "account");
    assert!(matches!(client.locate("nope"), Err(ClientError::NotFound(_))));
}

#[test]
fn opening_a_proxy_twice_returns_the_same_handle() {
    let node = Node::new(NodeId(0), NodeConfig::default(), None);
    node.register("x", catalog::counter(), catalog::counter_state(0)).unwrap();
    let txn = TxnId::compose(1, 1);
    node.handle(Request::Acquire {
        txn,
        algorithm: Algorithm::OptsvaCf,
        objects: vec![(ObjectId::new("x"), LockMode::Exclusive)],
        global: false,
    })
    .unwrap();
    let open = || {
        node.handle(Request::OpenProxy {
            txn,
            algorithm: Algorithm::OptsvaCf,
            irrevocable: false,
            declarations: vec![Declaration {
                object: ObjectId::new("x"),
                suprema: Suprema::new(0, 0, 1),
            }],
        })
        .unwrap()
    };
    let first = open();
    assert!(matches!(&first, Response::Opened { proxies } if proxies.len() == 1 && proxies[0].pv == Some(1)));
    assert_eq!(open(), first);
    node.handle(Request::Finalize { txn, commit: true }).unwrap();
}

#[test]
fn object_state_never_reaches_the_client() {
    // A balance no method returns in this run; it only lives in the
    // node's checkpoints and buffers.
    const MARK: i64 = 7_340_033;
    let node = Node::new(NodeId(0), NodeConfig::default(), None);
    node.register("acct", catalog::account(), catalog::account_state(MARK)).unwrap();
    let (transport, tap) = InProcTransport::new([node.clone()]).with_tap();
    let client = Client::new(
        Arc::new(transport),
        ClientConfig {
            id: 1,
            heartbeat: None,
            ..ClientConfig::default()
        },
    );
    for (deposit, abort) in [(5, false), (7, true)] {
        let mut t = client.transaction();
        let a = t.updates("acct", Some(1)).unwrap();
        t.start(|tx| {
            tx.invoke(&a, "deposit", deposit)?;
            if abort {
                return tx.abort();
            }
            Ok(())
        })
        .unwrap();
    }
    assert_eq!(node.state_of(&ObjectId::new("acct")).unwrap().get("balance"), Some(&Value::Int(MARK + 5)));
    let needle = |n: i64| optsva::value::encode(&Value::Int(n)).unwrap();
    let probe = needle(MARK);
    let state = optsva::value::encode(&catalog::account_state(MARK)).unwrap();
    assert!(state.windows(5).any(|w| w == &probe[probe.len() - 5..]), "probe must match encoded state");
    let frames = tap.frames();
    let replies: Vec<_> = frames.iter().filter(|(_, f)| matches!(f.kind, Kind::Reply | Kind::Fault)).collect();
    assert!(!replies.is_empty());
    for (_, f) in replies {
        for n in [MARK, MARK + 5, MARK + 12] {
            let pat = needle(n);
            let inner = &pat[pat.len() - 5..];
            assert!(!f.body.windows(inner.len()).any(|w| w == inner), "state {n} leaked in {:?}", f.to_reply());
        }
        match f.to_reply().unwrap() {
            Ok(Response::Value(v)) => assert_eq!(v, Value::Unit),
            Ok(_) | Err(_) => {}
        }
    }
}

#[test]
fn deposit_over_tcp_changes_only_server_state() {
    let node = Node::new(NodeId(0), NodeConfig::default(), None);
    node.register("acct", catalog::account(), catalog::account_state(10)).unwrap();
    let server = TcpServer::bind("127.0.0.1:0", node.clone()).unwrap();
    let client = tcp_client(std::slice::from_ref(&server), 1, None);
    let mut t = client.transaction();
    let a = t.accesses("acct", Some(1), Some(0), Some(1)).unwrap();
    let report = t
        .start(|tx| {
            tx.invoke(&a, "deposit", 100)?;
            tx.invoke(&a, "balance", ())
        })
        .unwrap();
    assert_eq!(report.outcome, Outcome::Committed(Value::Int(110)));
    assert_eq!(node.state_of(&ObjectId::new("acct")).unwrap().get("balance"), Some(&Value::Int(110)));
}

#[test]
fn concurrent_tcp_transactions_follow_version_order() {
    let recorder = Arc::new(Recorder::default());
    let nodes: Vec<_> = (0..2)
        .map(|i| Node::new(NodeId(i), NodeConfig::default(), Some(recorder.clone())))
        .collect();
    nodes[0].register("x", catalog::counter(), catalog::counter_state(0)).unwrap();
    nodes[1].register("y", catalog::counter(), catalog::counter_state(0)).unwrap();
    let servers: Vec<_> = nodes.iter().map(|n| TcpServer::bind("127.0.0.1:0", n.clone()).unwrap()).collect();
    thread::scope(|s| {
        for id in 1..=4 {
            let (servers, recorder) = (&servers, recorder.clone());
            s.spawn(move || {
                let client = tcp_client(servers, id, Some(recorder));
                let mut t = client.transaction();
                let x = t.updates("x", Some(1)).unwrap();
                let y = t.accesses("y", Some(1), Some(0), Some(1)).unwrap();
                let r = t
                    .start(|tx| {
                        tx.invoke(&x, "increment", ())?;
                        tx.invoke(&y, "get", ())?;
                        tx.invoke(&y, "increment", ())
                    })
                    .unwrap();
                assert!(r.outcome.is_committed());
            });
        }
    });
    for n in &nodes {
        n.record_final_states();
    }
    let h = recorder.snapshot();
    assert!(check_version_order(&h).is_empty());
    assert!(check_serializable(&h).is_serializable());
    assert_eq!(nodes[0].state_of(&ObjectId::new("x")).unwrap().get("value"), Some(&Value::Int(4)));
}

fn leased_cluster(lease: Duration) -> Cluster {
    let c = Cluster::in_process(
        1,
        NodeConfig {
            lease_timeout: Some(lease),
            ..NodeConfig::default()
        },
        None,
    );
    c.register(0, "x", catalog::counter(), catalog::counter_state(0)).unwrap();
    c
}

fn heartbeat_client(c: &Cluster, id: u32) -> Client {
    c.client_with(ClientConfig {
        id,
        heartbeat: Some(Duration::from_millis(50)),
        ..ClientConfig::default()
    })
}

#[test]
fn silent_client_is_rolled_back_and_its_resumption_is_forced_to_abort() {
    let lease = Duration::from_millis(400);
    let c = leased_cluster(lease);
    let stalled = heartbeat_client(&c, 1);
    let mut t = stalled.transaction();
    let x = t.updates("x", None).unwrap();
    let mut held = t.begin().unwrap();
    held.invoke(&x, "increment", ()).unwrap();
    stalled.pause_heartbeats(true);

    let started = Instant::now();
    let successor = heartbeat_client(&c, 2);
    let mut t = successor.transaction();
    let x2 = t.updates("x", Some(1)).unwrap();
    let r = t.start(|tx| tx.invoke(&x2, "increment", ())).unwrap();
    assert_eq!(r.outcome, Outcome::Committed(Value::Int(1)));
    assert!(started.elapsed() < lease + Duration::from_secs(2), "{:?}", started.elapsed());

    stalled.pause_heartbeats(false);
    assert!(matches!(held.invoke(&x, "increment", ()), Err(TxnError::Forced(_))));
    held.force_abort();
    assert_eq!(c.state_of("x").unwrap().get("value"), Some(&Value::Int(1)));
}

#[test]
fn heartbeats_keep_a_slow_transaction_alive() {
    let lease = Duration::from_millis(200);
    let c = leased_cluster(lease);
    let client = heartbeat_client(&c, 1);
    let mut t = client.transaction();
    let x = t.updates("x", Some(2)).unwrap();
    let r = t
        .start(|tx| {
            tx.invoke(&x, "increment", ())?;
            thread::sleep(lease * 4);
            tx.invoke(&x, "increment", ())
        })
        .unwrap();
    assert_eq!(r.outcome, Outcome::Committed(Value::Int(2)));
    assert_eq!(r.forced_aborts, 0);
}

#[test]
fn dropped_tcp_connection_rolls_back_after_the_lease() {
    let lease = Duration::from_millis(300);
    let node = Node::new(
        NodeId(0),
        NodeConfig {
            lease_timeout: Some(lease),
            ..NodeConfig::default()
        },
        None,
    );
    node.register("x", catalog::counter(), catalog::counter_state(0)).unwrap();
    let server = TcpServer::bind("127.0.0.1:0", node.clone()).unwrap();
    {
        let client = tcp_client(std::slice::from_ref(&server), 1, None);
        let mut t = client.transaction();
        let x = t.updates("x", None).unwrap();
        let mut held = t.begin().unwrap();
        held.invoke(&x, "increment", ()).unwrap();
        // Vanish without finalizing.
        std::mem::forget(held);
    }
    let started = Instant::now();
    let client = tcp_client(std::slice::from_ref(&server), 2, None);
    let mut t = client.transaction();
    let x = t.updates("x", Some(1)).unwrap();
    let r = t.start(|tx| tx.invoke(&x, "increment", ())).unwrap();
    assert_eq!(r.outcome, Outcome::Committed(Value::Int(1)));
    assert!(started.elapsed() < lease + Duration::from_secs(2));
}

#[test]
fn private_workloads_read_the_same_over_both_transports() {
    let base = BenchConfig {
        clients: 4,
        ops_hot: 0,
        ops_mild: 6,
        ops_cold: Some(2),
        read_ratio: 0.5,
        op_latency_ms: 0.0,
        txns_per_client: 4,
        seed: 21,
        ..BenchConfig::default()
    };
    let a = run_benchmark(&base).unwrap();
    let b = run_benchmark(&BenchConfig {
        transport: TransportKind::Tcp,
        ..base.clone()
    })
    .unwrap();
    assert_eq!(a.committed_ops, b.committed_ops);
    assert!(a.reads_per_client.values().any(|r| !r.is_empty()));
    assert_eq!(a.reads_per_client, b.reads_per_client);
}
