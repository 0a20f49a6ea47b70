//! Writes to an object that is still held elsewhere go to a log; the
//! transaction moves on to other objects while a background task applies
//! the log and releases the object.

use optsva::bench::scenarios;

fn main() {
    let report = scenarios::run("last-write-async").unwrap();
    print!("{report}");
    let [ti, tj, tk] = report.txns;
    for (name, t) in [("T_i", ti), ("T_j", tj), ("T_k", tk)] {
        println!("{name} x responses: {:?}", report.responses(t, "x"));
    }
}
