use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use optsva::bench::random::{generate_small, run_small, tally, SmallConfig, SmallWorkload};
use optsva::engine::Algorithm;
use optsva::history::check::{check_abort_accounting, check_serializable, check_version_order};

fn workload(seed: u64, config: SmallConfig) -> SmallWorkload {
    generate_small(&mut ChaCha8Rng::seed_from_u64(seed), &config)
}

fn algorithm() -> impl Strategy<Value = Algorithm> {
    prop::sample::select(Algorithm::ALL.to_vec())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn histories_keep_version_order_and_serialize(seed in any::<u64>(), algorithm in algorithm(), aborts in 0.0..0.5f64) {
        let w = workload(seed, SmallConfig { abort_probability: aborts, ..SmallConfig::default() });
        let run = run_small(&w, algorithm);
        prop_assert!(check_version_order(&run.history).is_empty());
        prop_assert!(check_serializable(&run.history).is_serializable());
        let acc = check_abort_accounting(&run.history);
        prop_assert!(acc.ok(), "{:?}", acc.violations);
        let (committed, manual, forced) = tally(&run.reports);
        prop_assert_eq!((committed, manual, forced), (acc.committed, acc.manual, acc.forced));
    }

    #[test]
    fn no_forced_aborts_without_manual_ones(seed in any::<u64>()) {
        let w = workload(seed, SmallConfig::default());
        let run = run_small(&w, Algorithm::OptsvaCf);
        prop_assert_eq!(run.forced_aborts(), 0);
        prop_assert_eq!(tally(&run.reports).0, w.txns.len());
    }

    #[test]
    fn irrevocable_transactions_are_never_forced(seed in any::<u64>()) {
        let mut w = workload(seed, SmallConfig {
            abort_probability: 0.5,
            irrevocable_probability: 0.4,
            ..SmallConfig::default()
        });
        for t in &mut w.txns {
            t.abort &= !t.irrevocable;
        }
        let run = run_small(&w, Algorithm::OptsvaCf);
        prop_assert_eq!(run.irrevocable_forced(&w), 0);
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        prop_assert_eq!(workload(seed, SmallConfig::default()), workload(seed, SmallConfig::default()));
    }
}
