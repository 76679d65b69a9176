//! Property tests over the data-level invariants.

use std::collections::BTreeMap;

use proptest::prelude::*;

use dmoe_core::cluster::{greedy_cluster, objective, random_balanced_assignment};
use dmoe_core::corpus::{sample_language_weights, Alphabet};
use dmoe_core::probe::SimilarityMatrix;
use dmoe_numeric::Rng;

fn alphabet_string() -> impl Strategy<Value = String> {
    let alphabet = Alphabet::default().as_string();
    let chars: Vec<char> = alphabet.chars().collect();
    proptest::collection::vec(proptest::sample::select(chars), 0..200)
        .prop_map(|cs| cs.into_iter().collect())
}

fn random_similarity(n: usize, seed: u64) -> SimilarityMatrix {
    let mut rng = Rng::seed_from_u64(seed);
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
        for j in (i + 1)..n {
            let v = rng.next_f64() * 2.0 - 1.0;
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    SimilarityMatrix {
        languages: (0..n).map(|i| format!("l{i:02}")).collect(),
        values,
        layer_subset: vec![0],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tokenization_roundtrips(text in alphabet_string()) {
        let alphabet = Alphabet::default();
        let ids = alphabet.encode(&text).unwrap();
        prop_assert_eq!(alphabet.decode(&ids).unwrap(), text);
    }

    #[test]
    fn sampling_weights_form_a_distribution(
        sizes in proptest::collection::btree_map("[a-z]{2}", 1usize..10_000_000, 1..20),
        exponent in 0.05f64..2.0,
    ) {
        let weights = sample_language_weights(&sizes, exponent).unwrap();
        let total: f64 = weights.values().sum();
        prop_assert!((total - 1.0).abs() < 1e-9);
        prop_assert!(weights.values().all(|&w| w > 0.0));
        // Larger corpora never get smaller weights.
        let pairs: Vec<(&String, &usize)> = sizes.iter().collect();
        for a in &pairs {
            for b in &pairs {
                if sizes[a.0] > sizes[b.0] {
                    prop_assert!(weights[a.0] >= weights[b.0]);
                }
            }
        }
    }

    #[test]
    fn greedy_clustering_is_balanced_for_all_shapes(
        n in 1usize..30,
        k_rel in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let k = 1 + ((n - 1) as f64 * k_rel) as usize;
        let m = random_similarity(n, seed);
        let a = greedy_cluster(&m, k).unwrap();
        let sizes: Vec<usize> = a.groups().iter().map(|g| g.len()).collect();
        prop_assert_eq!(sizes.len(), k);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        // Objective is well defined on the produced assignment.
        let score = objective(&m, &a).unwrap();
        prop_assert!(score.is_finite());
    }

    #[test]
    fn random_balanced_partitions_are_balanced(
        n in 1usize..30,
        k_rel in 0.0f64..1.0,
        seed in 0u64..1000,
    ) {
        let k = 1 + ((n - 1) as f64 * k_rel) as usize;
        let codes: Vec<String> = (0..n).map(|i| format!("l{i:02}")).collect();
        let mut rng = Rng::seed_from_u64(seed);
        let a = random_balanced_assignment(&codes, k, &mut rng).unwrap();
        let sizes: Vec<usize> = a.groups().iter().map(|g| g.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }
}

#[test]
fn weights_empty_map_rejected() {
    assert!(sample_language_weights(&BTreeMap::new(), 0.3).is_err());
}
