use std::thread;

use optsva::client::Outcome;
use optsva::cluster::Cluster;
use optsva::engine::Algorithm;
use optsva::history::check::{check_abort_accounting, check_serializable, check_version_order};
use optsva::object::catalog;
use optsva::value::Value;

fn bank(algorithm: Algorithm) {
    let c = Cluster::recorded(2);
    c.register(0, "A", catalog::account(), catalog::account_state(100)).unwrap();
    c.register(1, "B", catalog::account(), catalog::account_state(0)).unwrap();
    let client = c.client(1, algorithm);
    let mut t = client.transaction();
    let a = t.accesses("A", Some(1), Some(0), Some(1)).unwrap();
    let b = t.updates("B", Some(1)).unwrap();
    let report = t
        .start(|tx| {
            tx.invoke(&a, "withdraw", 100)?;
            tx.invoke(&b, "deposit", 100)?;
            if tx.invoke(&a, "balance", ())?.as_int() < Some(0) {
                return tx.abort();
            }
            Ok(())
        })
        .unwrap();
    assert_eq!(report.outcome, Outcome::Committed(()));
    assert_eq!(c.state_of("A").unwrap().get("balance"), Some(&Value::Int(0)));
    assert_eq!(c.state_of("B").unwrap().get("balance"), Some(&Value::Int(100)));
    let h = c.finish();
    assert!(check_version_order(&h).is_empty());
    assert!(check_serializable(&h).is_serializable());
    assert!(check_abort_accounting(&h).ok());
}

#[test]
fn bank_transfer_commits_under_every_algorithm() {
    for a in Algorithm::ALL {
        bank(a);
    }
}

#[test]
fn overdraft_aborts_and_restores() {
    for algorithm in Algorithm::ALL {
        let c = Cluster::recorded(2);
        c.register(0, "A", catalog::account(), catalog::account_state(50)).unwrap();
        c.register(1, "B", catalog::account(), catalog::account_state(0)).unwrap();
        let client = c.client(1, algorithm);
        let mut t = client.transaction();
        let a = t.accesses("A", Some(1), Some(0), Some(1)).unwrap();
        let b = t.updates("B", Some(1)).unwrap();
        let report = t
            .start(|tx| {
                tx.invoke(&a, "withdraw", 100)?;
                tx.invoke(&b, "deposit", 100)?;
                if tx.invoke(&a, "balance", ())?.as_int() < Some(0) {
                    return tx.abort();
                }
                Ok(())
            })
            .unwrap();
        assert!(matches!(report.outcome, Outcome::Aborted(_)), "{algorithm}");
        if algorithm.supports_manual_abort() {
            assert_eq!(c.state_of("A").unwrap().get("balance"), Some(&Value::Int(50)), "{algorithm}");
            assert_eq!(c.state_of("B").unwrap().get("balance"), Some(&Value::Int(0)), "{algorithm}");
        }
    }
}

#[test]
fn concurrent_increments_are_serialized() {
    for algorithm in Algorithm::ALL {
        let c = Cluster::recorded(2);
        c.register(0, "x", catalog::counter(), catalog::counter_state(0)).unwrap();
        c.register(1, "y", catalog::counter(), catalog::counter_state(0)).unwrap();
        thread::scope(|s| {
            for id in 1..=4 {
                let c = &c;
                s.spawn(move || {
                    let client = c.client(id, algorithm);
                    for _ in 0..5 {
                        let mut t = client.transaction();
                        let x = t.updates("x", Some(1)).unwrap();
                        let y = t.accesses("y", Some(1), Some(0), Some(1)).unwrap();
                        let r = t
                            .start(|tx| {
                                tx.invoke(&x, "increment", ())?;
                                tx.invoke(&y, "get", ())?;
                                tx.invoke(&y, "increment", ())?;
                                Ok(())
                            })
                            .unwrap();
                        assert!(r.outcome.is_committed());
                    }
                });
            }
        });
        assert_eq!(c.state_of("x").unwrap().get("value"), Some(&Value::Int(20)), "{algorithm}");
        assert_eq!(c.state_of("y").unwrap().get("value"), Some(&Value::Int(20)), "{algorithm}");
        let h = c.finish();
        assert!(check_version_order(&h).is_empty(), "{algorithm}");
        assert!(check_abort_accounting(&h).ok(), "{algorithm}");
    }
}
