//! Small randomized workloads for checking histories: a few transactions
//! over a few counters, started together on separate threads.

use std::collections::BTreeMap;
use std::sync::{Arc, Barrier};
use std::thread;

use rand::Rng;

use crate::client::{ClientConfig, Outcome, RetryPolicy, TxnReport};
use crate::cluster::Cluster;
use crate::engine::Algorithm;
use crate::history::{History, Recorder};
use crate::ids::ObjectId;
use crate::node::NodeConfig;
use crate::object::catalog;
use crate::value::Value;
use crate::versioning::{Bound, Suprema};

#[derive(Clone, Debug)]
pub struct SmallConfig {
    pub nodes: usize,
    pub max_txns: usize,
    pub max_objects: usize,
    pub max_ops: usize,
    /// Chance that a transaction ends with a manual abort.
    pub abort_probability: f64,
    pub irrevocable_probability: f64,
    /// Chance that a declared bound is left infinite.
    pub unbounded_probability: f64,
}

impl Default for SmallConfig {
    fn default() -> Self {
        SmallConfig {
            nodes: 2,
            max_txns: 5,
            max_objects: 4,
            max_ops: 6,
            abort_probability: 0.0,
            irrevocable_probability: 0.0,
            unbounded_probability: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmallOp {
    pub object: usize,
    pub method: &'static str,
    pub arg: Value,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmallTxn {
    pub ops: Vec<SmallOp>,
    pub suprema: BTreeMap<usize, Suprema>,
    pub irrevocable: bool,
    pub abort: bool,
    /// Yield the thread before each operation to vary interleavings.
    pub yields: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SmallWorkload {
    /// `(home node, id, initial value)`.
    pub objects: Vec<(usize, ObjectId, i64)>,
    pub txns: Vec<SmallTxn>,
}

pub fn generate_small(rng: &mut impl Rng, config: &SmallConfig) -> SmallWorkload {
    let n_obj = rng.random_range(1..=config.max_objects);
    let objects = (0..n_obj)
        .map(|i| (rng.random_range(0..config.nodes), ObjectId::new(format!("o{i}")), rng.random_range(0..10)))
        .collect();
    let n_txn = rng.random_range(1..=config.max_txns);
    let txns = (0..n_txn)
        .map(|t| {
            let n_ops = rng.random_range(0..=config.max_ops);
            let mut ops = Vec::with_capacity(n_ops);
            let mut counts: BTreeMap<usize, (u64, u64, u64)> = BTreeMap::new();
            for k in 0..n_ops {
                let object = rng.random_range(0..n_obj);
                let c = counts.entry(object).or_default();
                let (method, arg) = match rng.random_range(0..3) {
                    0 => {
                        c.0 += 1;
                        ("get", Value::Unit)
                    }
                    1 => {
                        c.1 += 1;
                        ("set", Value::Int(100 * (t as i64 + 1) + k as i64))
                    }
                    _ => {
                        c.2 += 1;
                        ("increment", Value::Unit)
                    }
                };
                ops.push(SmallOp { object, method, arg });
            }
            // Occasionally declare an object the body never touches.
            if rng.random_bool(0.2) {
                counts.entry(rng.random_range(0..n_obj)).or_default();
            }
            let mut bound = |n: u64| {
                if rng.random_bool(config.unbounded_probability) {
                    Bound::Infinite
                } else {
                    Bound::Finite(n)
                }
            };
            let suprema = counts
                .into_iter()
                .map(|(o, (r, w, u))| {
                    (
                        o,
                        Suprema {
                            max_reads: bound(r),
                            max_writes: bound(w),
                            max_updates: bound(u),
                        },
                    )
                })
                .collect();
            SmallTxn {
                yields: (0..n_ops).map(|_| rng.random_bool(0.3)).collect(),
                ops,
                suprema,
                irrevocable: rng.random_bool(config.irrevocable_probability),
                abort: rng.random_bool(config.abort_probability),
            }
        })
        .collect();
    SmallWorkload { objects, txns }
}

pub struct SmallRun {
    pub history: History,
    /// One report per transaction, in workload order.
    pub reports: Vec<TxnReport<()>>,
}

impl SmallRun {
    pub fn forced_aborts(&self) -> u32 {
        self.reports.iter().map(|r| r.forced_aborts).sum()
    }

    /// Forced aborts suffered by transactions flagged irrevocable.
    pub fn irrevocable_forced(&self, workload: &SmallWorkload) -> u32 {
        self.reports
            .iter()
            .zip(&workload.txns)
            .filter(|(_, t)| t.irrevocable)
            .map(|(r, _)| r.forced_aborts)
            .sum()
    }
}

/// Runs each transaction once, all starting together. Manual aborts are
/// skipped for algorithms that cannot undo them.
pub fn run_small(workload: &SmallWorkload, algorithm: Algorithm) -> SmallRun {
    let nodes = workload.objects.iter().map(|o| o.0).max().unwrap_or(0) + 1;
    let cluster = Cluster::in_process(
        nodes,
        NodeConfig {
            workers: 2,
            lease_timeout: None,
        },
        Some(Arc::new(Recorder::default())),
    );
    for (node, id, v) in &workload.objects {
        cluster
            .register(*node, id.clone(), catalog::counter(), catalog::counter_state(*v))
            .expect("fresh object ids");
    }
    let barrier = Barrier::new(workload.txns.len());
    let reports = thread::scope(|s| {
        let handles: Vec<_> = workload
            .txns
            .iter()
            .enumerate()
            .map(|(i, txn)| {
                let (cluster, barrier) = (&cluster, &barrier);
                s.spawn(move || {
                    let client = cluster.client_with(ClientConfig {
                        id: i as u32 + 1,
                        algorithm,
                        heartbeat: None,
                        retry: RetryPolicy {
                            max_attempts: 1,
                            retry_forced: false,
                        },
                    });
                    let mut t = client.transaction().irrevocable(txn.irrevocable);
                    let stubs: BTreeMap<usize, _> = txn
                        .suprema
                        .iter()
                        .map(|(o, s)| (*o, t.declare_suprema(workload.objects[*o].1.clone(), *s).expect("registered")))
                        .collect();
                    let abort = txn.abort && algorithm.supports_manual_abort();
                    barrier.wait();
                    t.start(|tx| {
                        for (op, y) in txn.ops.iter().zip(&txn.yields) {
                            if *y {
                                thread::yield_now();
                            }
                            tx.invoke(&stubs[&op.object], op.method, op.arg.clone())?;
                        }
                        if abort {
                            return tx.abort();
                        }
                        Ok(())
                    })
                    .expect("transaction ran")
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("transaction thread")).collect::<Vec<_>>()
    });
    SmallRun {
        history: cluster.finish(),
        reports,
    }
}

/// Outcome counts of a run: `(committed, manual, forced)`.
pub fn tally(reports: &[TxnReport<()>]) -> (usize, usize, usize) {
    let mut t = (0, 0, 0);
    for r in reports {
        match r.outcome {
            Outcome::Committed(()) => t.0 += 1,
            Outcome::Aborted(crate::history::AbortCause::Manual) => t.1 += 1,
            Outcome::Aborted(crate::history::AbortCause::Forced) => t.2 += 1,
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::history::check::{check_abort_accounting, check_serializable, check_version_order};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn generated_workloads_respect_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = SmallConfig::default();
        for _ in 0..200 {
            let w = generate_small(&mut rng, &c);
            assert!((1..=5).contains(&w.txns.len()));
            assert!((1..=4).contains(&w.objects.len()));
            assert!(w.txns.iter().all(|t| t.ops.len() <= 6));
        }
    }

    #[test]
    fn random_runs_check_clean_for_every_algorithm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = SmallConfig {
            abort_probability: 0.3,
            ..SmallConfig::default()
        };
        for _ in 0..30 {
            let w = generate_small(&mut rng, &c);
            for a in Algorithm::ALL {
                let run = run_small(&w, a);
                assert!(check_version_order(&run.history).is_empty(), "{a}: {:?}", w);
                assert!(check_serializable(&run.history).is_serializable(), "{a}: {:?}", w);
                let acc = check_abort_accounting(&run.history);
                assert!(acc.ok(), "{a}: {:?}", acc.violations);
            }
        }
    }
}
