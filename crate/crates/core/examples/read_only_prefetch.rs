//! A read-only object is copied and released by a background task, so a
//! later writer proceeds before the reader has performed a single read.

use optsva::bench::scenarios;
use optsva::history::EventKind;

fn main() {
    let report = scenarios::run("read-only-async").unwrap();
    print!("{report}");
    let [_, tj, tk] = report.txns;
    println!("reader got {:?}", report.responses(tj, "x"));
    println!("writer got {:?}", report.responses(tk, "x"));
    for e in &report.history.events {
        if matches!(e.kind, EventKind::Access { .. } | EventKind::Release { .. } | EventKind::Response { .. }) {
            println!("{:>3} {:<8} {:?}", e.seq, e.txn.map(|t| t.to_string()).unwrap_or_default(), e.kind);
        }
    }
}
