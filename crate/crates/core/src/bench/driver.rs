//! Runs a generated workload against a cluster and measures it.

use std::collections::BTreeMap;
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use crate::bench::config::{BenchConfig, ConfigError, TransportKind};
use crate::bench::report::ReportRow;
use crate::bench::workload::{generate, ClientScript, Target, Workload};
use crate::client::{Client, ClientConfig, ClientError, Outcome, RetryPolicy, Stub};
use crate::engine::Algorithm;
use crate::history::{History, Recorder};
use crate::ids::NodeId;
use crate::node::{Node, NodeConfig};
use crate::object::catalog;
use crate::transport::{InProcTransport, TcpServer, TcpTransport, Transport};
use crate::value::Value;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("client {client}: {source}")]
    Client { client: u32, source: ClientError },
    #[error("cluster setup: {0}")]
    Setup(String),
}

#[derive(Clone, Debug, Default)]
struct ClientResult {
    committed_txns: u64,
    committed_ops: u64,
    latencies: Vec<Duration>,
    manual: u64,
    forced: u64,
    reads: Vec<Value>,
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub algorithm: Algorithm,
    pub nodes: usize,
    pub clients: usize,
    pub read_ratio: f64,
    /// Committed operations on shared objects per second.
    pub throughput_ops_s: f64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub manual_aborts: u64,
    pub forced_aborts: u64,
    pub committed_txns: u64,
    pub committed_ops: u64,
    pub wall: Duration,
    /// Sum of transaction latencies beyond the time spent in operations.
    pub wait_ms_total: f64,
    /// Read results of committed transactions, in program order.
    pub reads_per_client: BTreeMap<u32, Vec<Value>>,
    pub history: Option<History>,
}

impl BenchReport {
    pub fn row(&self) -> ReportRow {
        ReportRow {
            algorithm: self.algorithm.name().to_string(),
            nodes: self.nodes,
            clients: self.clients,
            read_ratio: self.read_ratio,
            throughput_ops_s: self.throughput_ops_s,
            p50_ms: self.p50_ms,
            p99_ms: self.p99_ms,
            manual_aborts: self.manual_aborts,
            forced_aborts: self.forced_aborts,
        }
    }
}

/// Nearest-rank percentile in milliseconds.
pub fn percentile_ms(sorted: &[Duration], p: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1].as_secs_f64() * 1000.0
}

struct Deployment {
    nodes: Vec<Arc<Node>>,
    servers: Vec<TcpServer>,
    inproc: Option<Arc<InProcTransport>>,
}

impl Deployment {
    fn transport(&self) -> Arc<dyn Transport> {
        match &self.inproc {
            Some(t) => t.clone(),
            None => Arc::new(TcpTransport::new(
                self.servers
                    .iter()
                    .enumerate()
                    .map(|(i, s)| (NodeId(i as u32), s.local_addr())),
            )),
        }
    }
}

fn deploy(config: &BenchConfig, workload: &Workload, recorder: Option<Arc<Recorder>>) -> Result<Deployment, BenchError> {
    let nodes: Vec<Arc<Node>> = (0..config.nodes)
        .map(|i| Node::new(NodeId(i as u32), NodeConfig::default(), recorder.clone()))
        .collect();
    let cell = catalog::cell(config.op_latency());
    for (node, id) in workload.hot.iter().chain(&workload.mild) {
        nodes[*node]
            .register(id.clone(), cell.clone(), catalog::cell_state(0))
            .map_err(|e| BenchError::Setup(e.to_string()))?;
    }
    Ok(match config.transport {
        TransportKind::InProcess => Deployment {
            inproc: Some(Arc::new(InProcTransport::new(nodes.iter().cloned()))),
            servers: Vec::new(),
            nodes,
        },
        TransportKind::Tcp => Deployment {
            servers: nodes
                .iter()
                .map(|n| TcpServer::bind("127.0.0.1:0", Arc::clone(n)))
                .collect::<Result<_, _>>()
                .map_err(|e| BenchError::Setup(e.to_string()))?,
            inproc: None,
            nodes,
        },
    })
}

fn run_client(client: &Client, script: &ClientScript, cold_size: usize) -> Result<ClientResult, ClientError> {
    let mut out = ClientResult::default();
    let mut cold = vec![0i64; cold_size];
    for txn in &script.txns {
        let mut t = client.transaction();
        let stubs: BTreeMap<_, Stub> = txn
            .suprema
            .iter()
            .map(|(id, s)| Ok((id.clone(), t.declare_suprema(id.clone(), *s)?)))
            .collect::<Result<_, ClientError>>()?;
        let started = Instant::now();
        let report = t.start(|tx| {
            let mut reads = Vec::new();
            for op in &txn.ops {
                match (&op.target, op.write) {
                    (Target::Shared(id), Some(v)) => {
                        tx.invoke(&stubs[id], "write", v)?;
                    }
                    (Target::Shared(id), None) => reads.push(tx.invoke(&stubs[id], "read", ())?),
                    (Target::Cold(i), Some(v)) => cold[*i] = v,
                    (Target::Cold(i), None) => {
                        std::hint::black_box(cold[*i]);
                    }
                }
            }
            if txn.abort {
                return tx.abort();
            }
            Ok(reads)
        })?;
        out.manual += report.manual_aborts as u64;
        out.forced += report.forced_aborts as u64;
        if let Outcome::Committed(reads) = report.outcome {
            let elapsed = started.elapsed();
            out.committed_txns += 1;
            out.committed_ops += txn.shared_ops() as u64;
            out.latencies.push(elapsed);
            out.reads.extend(reads);
        }
    }
    Ok(out)
}

/// Generates the workload, runs every client to completion and aggregates.
pub fn run_benchmark(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    let workload = generate(config)?;
    let recorder = config.record_history.as_ref().map(|_| Arc::new(Recorder::default()));
    run_workload(config, &workload, recorder)
}

pub fn run_workload(
    config: &BenchConfig,
    workload: &Workload,
    recorder: Option<Arc<Recorder>>,
) -> Result<BenchReport, BenchError> {
    let deployment = deploy(config, workload, recorder.clone())?;
    let barrier = Barrier::new(workload.clients.len() + 1);
    let op_latency = config.op_latency();
    let (results, wall) = thread::scope(|s| {
        let handles: Vec<_> = workload
            .clients
            .iter()
            .map(|script| {
                let transport = deployment.transport();
                let barrier = &barrier;
                let recorder = recorder.clone();
                s.spawn(move || {
                    let mut client = Client::new(
                        transport,
                        ClientConfig {
                            id: script.client,
                            algorithm: config.algorithm,
                            heartbeat: Some(Duration::from_secs(1)),
                            retry: RetryPolicy {
                                max_attempts: 64,
                                retry_forced: true,
                            },
                        },
                    );
                    if let Some(r) = recorder {
                        client = client.with_recorder(r);
                    }
                    barrier.wait();
                    run_client(&client, script, config.cold_array_size)
                        .map_err(|source| BenchError::Client {
                            client: script.client,
                            source,
                        })
                })
            })
            .collect();
        barrier.wait();
        let start = Instant::now();
        let results: Vec<_> = handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect();
        (results, start.elapsed())
    });
    let mut latencies = Vec::new();
    let mut report = BenchReport {
        algorithm: config.algorithm,
        nodes: config.nodes,
        clients: workload.clients.len(),
        read_ratio: config.read_ratio,
        throughput_ops_s: 0.0,
        p50_ms: 0.0,
        p99_ms: 0.0,
        manual_aborts: 0,
        forced_aborts: 0,
        committed_txns: 0,
        committed_ops: 0,
        wall,
        wait_ms_total: 0.0,
        reads_per_client: BTreeMap::new(),
        history: None,
    };
    for (script, r) in workload.clients.iter().zip(results) {
        let r = r?;
        report.manual_aborts += r.manual;
        report.forced_aborts += r.forced;
        report.committed_txns += r.committed_txns;
        report.committed_ops += r.committed_ops;
        let busy = op_latency.as_secs_f64() * 1000.0;
        for (l, t) in r.latencies.iter().zip(script.txns.iter().filter(|t| !t.abort)) {
            report.wait_ms_total += (l.as_secs_f64() * 1000.0 - busy * t.shared_ops() as f64).max(0.0);
        }
        latencies.extend(r.latencies);
        report.reads_per_client.insert(script.client, r.reads);
    }
    latencies.sort();
    report.p50_ms = percentile_ms(&latencies, 50.0);
    report.p99_ms = percentile_ms(&latencies, 99.0);
    report.throughput_ops_s = report.committed_ops as f64 / wall.as_secs_f64().max(1e-9);
    if let Some(r) = &recorder {
        for n in &deployment.nodes {
            n.record_final_states();
        }
        report.history = Some(r.snapshot());
    }
    for s in &deployment.servers {
        s.shutdown();
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles() {
        let v: Vec<Duration> = (1..=100).map(Duration::from_millis).collect();
        assert_eq!(percentile_ms(&v, 50.0), 50.0);
        assert_eq!(percentile_ms(&v, 99.0), 99.0);
        assert_eq!(percentile_ms(&[], 50.0), 0.0);
    }

    #[test]
    fn small_run_commits_everything() {
        let config = BenchConfig {
            clients: 3,
            txns_per_client: 3,
            ops_hot: 4,
            ops_mild: 2,
            op_latency_ms: 0.0,
            ..BenchConfig::default()
        };
        for algorithm in Algorithm::ALL {
            let r = run_benchmark(&BenchConfig { algorithm, ..config.clone() }).unwrap();
            assert_eq!(r.committed_txns, 9, "{algorithm}");
            assert_eq!(r.committed_ops, 54, "{algorithm}");
            assert_eq!(r.forced_aborts, 0, "{algorithm}");
        }
    }
}
