mod common;

use std::collections::BTreeSet;

use notionlab::hierarchy::closure;
use notionlab::props::{PropertyAtom, Side};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn named_rules_are_in_the_closure() {
    for (a, b) in common::required_rules() {
        assert!(closure(&BTreeSet::from([a])).contains(&b), "{} should give {}", a.name(), b.name());
    }
}

#[test]
fn generator_reaches_strict_atoms() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let samples: Vec<_> = (0..2000).map(|_| common::random_pair(&mut rng)).collect();
    for atom in common::pair_atoms() {
        let hits = samples.iter().filter(|q| common::accepts(atom, q)).count();
        assert!(hits >= 20, "{} accepted only {hits} times", atom.name());
    }
}

#[test]
fn generator_refutes_converse_rules() {
    use PropertyAtom::*;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let samples: Vec<_> = (0..2000).map(|_| common::random_pair(&mut rng)).collect();
    for (a, b) in [
        (Count(Side::Sender), Active(Side::Sender)),
        (Histogram(Side::Sender), Partition(Side::Sender)),
        (Active(Side::Receiver), Frequency(Side::Receiver)),
        (Nothing, Something),
    ] {
        let refuted = samples.iter().any(|q| common::accepts(a, q) && !common::accepts(b, q));
        assert!(refuted, "no sample separates {} from {}", a.name(), b.name());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn closure_never_overclaims(seed in any::<u64>()) {
        let queries = common::random_pair(&mut ChaCha8Rng::seed_from_u64(seed));
        let bad = common::lattice_violations(&queries);
        prop_assert!(bad.is_empty(), "{:?}", bad.iter().map(|(a, b)| (a.name(), b.name())).collect::<Vec<_>>());
    }

    #[test]
    fn permutation_matches_partition_on_one_batch(seed in any::<u64>()) {
        let mut queries = common::random_pair(&mut ChaCha8Rng::seed_from_u64(seed));
        queries.truncate(1);
        prop_assert_eq!(
            common::accepts(PropertyAtom::Permutation, &queries),
            common::accepts(PropertyAtom::Partition(Side::Sender), &queries)
        );
    }
}
