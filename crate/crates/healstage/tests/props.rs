//! Randomized invariants over the clustering and quantile primitives.

use proptest::prelude::*;

use healstage::stagedisc::{kmeans, quantile};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// The linear-interpolation quantile stays inside the data range and is
    /// monotone in p.
    #[test]
    fn quantile_bounded_and_monotone(
        mut values in prop::collection::vec(-1e3f64..1e3, 1..40),
        p1 in 0.0f64..=1.0,
        p2 in 0.0f64..=1.0,
    ) {
        values.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (lo, hi) = (p1.min(p2), p1.max(p2));
        let qlo = quantile(&values, lo);
        let qhi = quantile(&values, hi);
        prop_assert!(qlo >= values[0] - 1e-9 && qhi <= values[values.len() - 1] + 1e-9);
        prop_assert!(qlo <= qhi + 1e-9);
    }

    /// k-means always returns one in-range assignment per point, populates
    /// every cluster, and its inertia never beats the k=n lower bound of 0.
    #[test]
    fn kmeans_assignments_well_formed(
        points in prop::collection::vec(
            prop::collection::vec(-10.0f64..10.0, 3),
            4..30,
        ),
        k in 1usize..4,
        seed in 0u64..100,
    ) {
        let model = kmeans(&points, k, seed, 50, 1e-6).unwrap();
        prop_assert_eq!(model.assignments.len(), points.len());
        prop_assert!(model.assignments.iter().all(|&a| a < k));
        prop_assert!(model.inertia >= 0.0);
        for c in 0..k {
            prop_assert!(model.assignments.contains(&c), "cluster {} empty", c);
        }
    }
}
