//! Records a short concurrent run, saves the history as JSON lines, reads it
//! back and checks it.

use std::thread;

use optsva::cluster::Cluster;
use optsva::engine::Algorithm;
use optsva::history::check::{check_abort_accounting, check_serializable, check_version_order};
use optsva::history::History;
use optsva::object::catalog;

fn main() {
    let cluster = Cluster::recorded(2);
    cluster.register(0, "x", catalog::counter(), catalog::counter_state(0)).unwrap();
    cluster.register(1, "y", catalog::counter(), catalog::counter_state(0)).unwrap();
    thread::scope(|s| {
        for id in 1..=3 {
            let cluster = &cluster;
            s.spawn(move || {
                let client = cluster.client(id, Algorithm::OptsvaCf);
                let mut t = client.transaction();
                let x = t.updates("x", Some(1)).unwrap();
                let y = t.reads("y", Some(1)).unwrap();
                t.start(|tx| {
                    tx.invoke(&x, "increment", ())?;
                    tx.invoke(&y, "get", ())
                })
                .unwrap();
            });
        }
    });
    let path = std::env::temp_dir().join("optsva-example-history.jsonl");
    cluster.finish().write_jsonl(&path).unwrap();
    let h = History::read_jsonl(&path).unwrap();
    println!("{} events in {}", h.len(), path.display());
    println!("version order violations: {:?}", check_version_order(&h));
    println!("serializability: {:?}", check_serializable(&h));
    println!("aborts: {:?}", check_abort_accounting(&h));
}
