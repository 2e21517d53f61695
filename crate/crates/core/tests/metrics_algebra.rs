//! Ordering of worst-group, mean and best-group accuracy.

use afr_core::metrics::evaluate_predictions;
use proptest::prelude::*;

/// Predictions, labels and groups with every group present, plus a
/// prevalence vector.
fn diagnostics_input() -> impl Strategy<Value = (Vec<usize>, Vec<usize>, Vec<usize>, Vec<f64>)> {
    (1usize..6, 1usize..80).prop_flat_map(|(g, extra)| {
        let n = g + extra;
        (
            prop::collection::vec(0usize..3, n),
            prop::collection::vec(0usize..3, n),
            prop::collection::vec(0..g, n).prop_map(move |mut groups| {
                for k in 0..g {
                    groups[k] = k;
                }
                groups
            }),
            prop::collection::vec(0.0..1.0f64, g)
                .prop_filter("nonzero mass", |p| p.iter().sum::<f64>() > 1e-3),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn wga_le_mean_le_max((pred, labels, groups, raw) in diagnostics_input()) {
        let s: f64 = raw.iter().sum();
        let prevalence: Vec<f64> = raw.iter().map(|p| p / s).collect();
        let d = evaluate_predictions(&pred, &labels, &groups, &prevalence).unwrap();
        let max = d.per_group_accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = d.per_group_accuracy.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(d.worst_group_accuracy, min);
        prop_assert!(d.worst_group_accuracy <= d.mean_accuracy);
        prop_assert!(d.mean_accuracy <= max);
        prop_assert_eq!(d.group_counts.iter().sum::<usize>(), pred.len());
    }
}

#[test]
fn hand_case() {
    // group 0 all correct, group 1 half correct, prevalence (0.9, 0.1)
    let d = evaluate_predictions(&[0, 0, 1, 0], &[0, 0, 1, 1], &[0, 0, 1, 1], &[0.9, 0.1]).unwrap();
    assert_eq!(d.per_group_accuracy, vec![1.0, 0.5]);
    assert_eq!(d.worst_group_accuracy, 0.5);
    assert_eq!(d.mean_accuracy, 0.95);
}
