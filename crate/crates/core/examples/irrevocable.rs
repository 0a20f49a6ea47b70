//! An irrevocable transaction waits for its predecessors to finish instead
//! of reading released values, so their aborts can never cascade into it.

use std::thread;
use std::time::Duration;

use optsva::cluster::Cluster;
use optsva::engine::Algorithm;
use optsva::object::catalog;

fn main() {
    let cluster = Cluster::recorded(1);
    cluster.register(0, "x", catalog::counter(), catalog::counter_state(0)).unwrap();
    let (a, b) = (cluster.client(1, Algorithm::OptsvaCf), cluster.client(2, Algorithm::OptsvaCf));

    let mut t = a.transaction();
    let xa = t.updates("x", Some(1)).unwrap();
    let mut flaky = t.begin().unwrap();
    let mut t = b.transaction().irrevocable(true);
    let xb = t.updates("x", Some(1)).unwrap();
    let mut safe = t.begin().unwrap();

    thread::scope(|s| {
        s.spawn(|| {
            flaky.invoke(&xa, "increment", ()).unwrap();
            thread::sleep(Duration::from_millis(50));
            flaky.abort().unwrap();
            println!("first transaction aborted");
        });
        s.spawn(|| {
            let v = safe.invoke(&xb, "increment", ()).unwrap();
            println!("irrevocable transaction waited out the abort and got {v}");
            println!("irrevocable commit: {:?}", safe.commit().unwrap());
        });
    });
    println!("final x = {:?}", cluster.state_of("x").unwrap().get("value"));
}
