//! One transaction reads a value released early by another, which then
//! aborts. The reader is forced to abort and `x` returns to its checkpoint.

use optsva::bench::scenarios;

fn main() {
    let report = scenarios::run("cascade").unwrap();
    print!("{report}");
    for e in &report.history.events {
        println!("{:>3} {:<8} {:?}", e.seq, e.txn.map(|t| t.to_string()).unwrap_or_default(), e.kind);
    }
}
