//! A desk-scale distributed Eigenbench run: 2 nodes, 8 clients, 3 ms
//! operations. Pass `tcp` to go over loopback sockets.

use optsva::bench::config::TransportKind;
use optsva::bench::{run_benchmark, BenchConfig};
use optsva::engine::Algorithm;

fn main() {
    let transport = match std::env::args().nth(1).as_deref() {
        Some("tcp") => TransportKind::Tcp,
        _ => TransportKind::InProcess,
    };
    for algorithm in [Algorithm::OptsvaCf, Algorithm::Sva, Algorithm::Glock] {
        let r = run_benchmark(&BenchConfig {
            algorithm,
            transport,
            txns_per_client: 5,
            ..BenchConfig::default()
        })
        .unwrap();
        println!(
            "{:<10} {:>8.1} ops/s  p50 {:>6.1} ms  p99 {:>6.1} ms  aborts {}/{}",
            r.algorithm.name(),
            r.throughput_ops_s,
            r.p50_ms,
            r.p99_ms,
            r.manual_aborts,
            r.forced_aborts
        );
    }
}
