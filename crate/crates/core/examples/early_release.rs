//! A transaction that declares one update on `x` releases it right after
//! that update, so a second transaction reads its value before it commits.

use std::thread;
use std::time::Duration;

use optsva::cluster::Cluster;
use optsva::engine::Algorithm;
use optsva::history::EventKind;
use optsva::object::catalog;

fn main() {
    let cluster = Cluster::recorded(1);
    cluster.register(0, "x", catalog::counter(), catalog::counter_state(0)).unwrap();
    let (first, second) = (cluster.client(1, Algorithm::OptsvaCf), cluster.client(2, Algorithm::OptsvaCf));

    let mut t = first.transaction();
    let x1 = t.updates("x", Some(1)).unwrap();
    let mut ti = t.begin().unwrap();
    let mut t = second.transaction();
    let x2 = t.updates("x", Some(1)).unwrap();
    let mut tj = t.begin().unwrap();

    thread::scope(|s| {
        s.spawn(|| {
            ti.invoke(&x1, "increment", ()).unwrap();
            // Keep working long after x was handed over.
            thread::sleep(Duration::from_millis(100));
            ti.commit().unwrap().unwrap();
        });
        s.spawn(|| {
            let seen = tj.invoke(&x2, "increment", ()).unwrap();
            println!("second transaction sees {seen} while the first is still running");
            tj.commit().unwrap().unwrap();
        });
    });

    for e in cluster.finish().events {
        let what = match &e.kind {
            EventKind::Release { object, pv } => format!("release {object} (pv {pv})"),
            EventKind::Response { object, payload } => format!("{object} -> {payload}"),
            EventKind::Commit => "commit".into(),
            _ => continue,
        };
        println!("{:>3} {:<8} {what}", e.seq, e.txn.map(|t| t.to_string()).unwrap_or_default());
    }
}
