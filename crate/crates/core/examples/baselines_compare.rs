//! Runs the same small Eigenbench workload under every algorithm and prints
//! one CSV row each.

use optsva::bench::report::write_csv;
use optsva::bench::{run_benchmark, BenchConfig};
use optsva::engine::Algorithm;

fn main() {
    let base = BenchConfig {
        clients: 8,
        txns_per_client: 4,
        op_latency_ms: 1.0,
        ..BenchConfig::default()
    };
    let rows: Vec<_> = Algorithm::ALL
        .into_iter()
        .map(|algorithm| run_benchmark(&BenchConfig { algorithm, ..base.clone() }).unwrap().row())
        .collect();
    write_csv(std::io::stdout().lock(), &rows).unwrap();
}
