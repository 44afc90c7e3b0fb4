mod oracles;

use proptest::prelude::*;
use rapnet_core::anchors::{assign_anchors_to_levels, kmeans_anchors, kmeans_init};
use rapnet_core::data::{generate_synthetic_corpus, Subset, SyntheticSpec};

fn synthetic_widths() -> Vec<f64> {
    let corpus = generate_synthetic_corpus(&SyntheticSpec::default()).unwrap();
    corpus
        .annotations
        .iter()
        .filter(|a| a.subset == Subset::Training)
        .flat_map(|a| a.segments.iter().map(|s| s.width()))
        .collect()
}

#[test]
fn all_equal_widths_give_one_centroid() {
    let r = kmeans_anchors(&[0.3; 20], 1, 0, 100).unwrap();
    assert_eq!(r.centroids, vec![0.3]);
}

#[test]
fn two_tight_clusters_match_partition_brute_force() {
    let mut widths = vec![0.1; 50];
    widths.extend([0.8; 50]);
    let r = kmeans_anchors(&widths, 2, 0, 100).unwrap();

    for (c, b) in r.centroids.iter().zip(oracles::two_cluster_split(&widths)) {
        assert!((c - b).abs() < 1e-12);
    }
    assert_eq!(r.centroids, vec![0.1, 0.8]);
}

#[test]
fn synthetic_corpus_k12_matches_independent_lloyd() {
    let widths = synthetic_widths();
    let init = kmeans_init(&widths, 12, 0).unwrap();
    let r = kmeans_anchors(&widths, 12, 0, 100).unwrap();
    assert!(r.converged);
    let mut sorted = widths.clone();
    sorted.sort_by(f64::total_cmp);
    assert_eq!(r.centroids, oracles::lloyd(&sorted, &init));
    for pair in r.objective_trace.windows(2) {
        assert!(pair[1] <= pair[0] + 1e-12);
    }
    let set = assign_anchors_to_levels(&r.centroids, 6).unwrap();
    assert_eq!(set.per_level(), 2);
    assert_eq!(set.level(0), &r.centroids[..2]);
}

#[test]
fn level_chunking() {
    let widths: Vec<f64> = (1..=18).map(|i| i as f64 / 18.0).collect();
    let set = assign_anchors_to_levels(&widths, 6).unwrap();
    assert_eq!(set.per_level(), 3);
    assert_eq!(set.level(0), &widths[..3]);
    assert_eq!(set.level(5), &widths[15..]);
    assert!(assign_anchors_to_levels(&widths[..13], 6).is_err());
}

#[test]
fn too_few_distinct_widths_is_an_error() {
    assert!(kmeans_anchors(&[0.2, 0.2, 0.4], 3, 0, 100).is_err());
    assert!(kmeans_anchors(&[0.2, 0.4], 0, 0, 100).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clustering_properties(
        widths in prop::collection::vec(0.01f64..1.0, 12..80),
        k in 1usize..6,
        seed in 0u64..50,
        rotate in 0usize..80,
    ) {
        let mut distinct = widths.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        prop_assume!(distinct.len() >= k);
        let r = kmeans_anchors(&widths, k, seed, 100).unwrap();
        prop_assert_eq!(r.centroids.len(), k);
        prop_assert!(r.centroids.windows(2).all(|p| p[0] <= p[1]));
        let lo = distinct[0];
        let hi = *distinct.last().unwrap();
        prop_assert!(r.centroids.iter().all(|&c| c >= lo && c <= hi));
        for pair in r.objective_trace.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 1e-12);
        }
        let mut shuffled = widths.clone();
        shuffled.rotate_left(rotate % widths.len());
        shuffled.reverse();
        prop_assert_eq!(kmeans_anchors(&shuffled, k, seed, 100).unwrap(), r);
    }
}
