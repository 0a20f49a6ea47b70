//! Moves money between two accounts hosted on different nodes, then tries
//! an overdraft that the transaction aborts itself.

use optsva::client::Outcome;
use optsva::cluster::Cluster;
use optsva::engine::Algorithm;
use optsva::object::catalog;

fn balance(c: &Cluster, id: &str) -> i64 {
    c.state_of(id).and_then(|s| s.get("balance").and_then(|v| v.as_int())).unwrap_or_default()
}

fn main() {
    let cluster = Cluster::recorded(2);
    cluster.register(0, "alice", catalog::account(), catalog::account_state(100)).unwrap();
    cluster.register(1, "bob", catalog::account(), catalog::account_state(0)).unwrap();
    let client = cluster.client(1, Algorithm::OptsvaCf);

    for amount in [60, 60] {
        let mut t = client.transaction();
        let from = t.accesses("alice", Some(1), Some(0), Some(1)).unwrap();
        let to = t.updates("bob", Some(1)).unwrap();
        let report = t
            .start(|tx| {
                tx.invoke(&from, "withdraw", amount)?;
                tx.invoke(&to, "deposit", amount)?;
                if tx.invoke(&from, "balance", ())?.as_int() < Some(0) {
                    return tx.abort();
                }
                Ok(())
            })
            .unwrap();
        let verdict = match report.outcome {
            Outcome::Committed(()) => "committed".to_string(),
            Outcome::Aborted(cause) => format!("aborted ({cause:?})"),
        };
        println!(
            "transfer {amount}: {verdict}; alice = {}, bob = {}",
            balance(&cluster, "alice"),
            balance(&cluster, "bob")
        );
    }
}
