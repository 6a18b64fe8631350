use approx::assert_relative_eq;
use ecaml::confusion::{energy_confusion, ClassGroup};
use ecaml::divergences::{ged, Semimetric};
use ecaml::eval::{nmi, pairwise_f1, recall_at_k};
use ndarray::Array2;
use proptest::prelude::*;

fn points(min_rows: usize, max_rows: usize) -> impl Strategy<Value = Array2<f64>> {
    (min_rows..=max_rows, 1usize..=6).prop_flat_map(|(n, d)| {
        prop::collection::vec(-5.0..5.0f64, n * d).prop_map(move |v| Array2::from_shape_vec((n, d), v).unwrap())
    })
}

fn split_groups(n: usize, cut: usize) -> (ClassGroup, ClassGroup) {
    (ClassGroup::new(0, (0..cut).collect()).unwrap(), ClassGroup::new(1, (cut..n).collect()).unwrap())
}

proptest! {
    #[test]
    fn ec_is_symmetric_and_translation_invariant(x in points(2, 12), shift in -3.0..3.0f64, cut_frac in 0.1..0.9f64) {
        let n = x.nrows();
        let cut = ((n as f64 * cut_frac) as usize).clamp(1, n - 1);
        let (a, b) = split_groups(n, cut);
        let ab = energy_confusion(x.view(), &a, &b).unwrap().value;
        let ba = energy_confusion(x.view(), &b, &a).unwrap().value;
        assert_relative_eq!(ab, ba, max_relative = 1e-12);
        let moved = &x + shift;
        let shifted = energy_confusion(moved.view(), &a, &b).unwrap().value;
        assert_relative_eq!(ab, shifted, epsilon = 1e-9, max_relative = 1e-9);
        let scaled = energy_confusion((&x * 2.0).view(), &a, &b).unwrap().value;
        assert_relative_eq!(scaled, 4.0 * ab, epsilon = 1e-9, max_relative = 1e-9);
    }

    #[test]
    fn ged_vanishes_on_identical_sets(x in points(2, 8)) {
        let g = ged(x.view(), x.view(), &Semimetric::SquaredEuclidean).unwrap();
        prop_assert!(g.abs() <= 1e-9 * (1.0 + x.iter().map(|v| v * v).sum::<f64>()));
    }

    #[test]
    fn recall_is_monotone_in_k(x in points(6, 20), seed in 0u32..4) {
        let labels: Vec<u32> = (0..x.nrows() as u32).map(|i| (i + seed) % 3).collect();
        let r = recall_at_k(x.view(), &labels, &[1, 2, 4, 8]).unwrap();
        let vals: Vec<f64> = [1, 2, 4, 8].iter().map(|&k| r.recall(k).unwrap()).collect();
        prop_assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(vals.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn clustering_scores_ignore_label_names(a in prop::collection::vec(0usize..4, 2..40), offset in 1usize..50) {
        let b: Vec<usize> = a.iter().enumerate().map(|(i, _)| i % 3).collect();
        let renamed: Vec<usize> = a.iter().map(|c| c * 7 + offset).collect();
        prop_assert_eq!(nmi(&a, &b).unwrap(), nmi(&renamed, &b).unwrap());
        prop_assert_eq!(pairwise_f1(&a, &b).unwrap(), pairwise_f1(&renamed, &b).unwrap());
        let n = nmi(&a, &b).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&n));
    }
}
