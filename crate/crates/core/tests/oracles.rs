mod common;

use ccdet::detector::{decode, DetectorConfig, RawPrediction};
use ccdet::evalmetrics::roc_auc;
use ccdet::ndtensor::Tensor;
use ccdet::postprocess::nms;
use common::equiv::*;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn conv_matches_naive_loops(seed in any::<u64>()) {
        let err = conv_trial(seed);
        prop_assert!(err < CONV_TOL, "conv error {err:e}");
    }

    #[test]
    fn maxpool_matches_naive_loops(seed in any::<u64>()) {
        prop_assert!(pool_trial(seed));
    }

    #[test]
    fn nms_matches_brute_force(seed in any::<u64>()) {
        prop_assert!(nms_trial(seed));
    }

    #[test]
    fn decode_matches_per_cell_loop(seed in any::<u64>()) {
        prop_assert!(decode_trial(seed));
    }

    #[test]
    fn ciou_matches_rasterisation(seed in any::<u64>()) {
        let err = ciou_trial(seed);
        prop_assert!(err < CIOU_TOL, "ciou error {err:e}");
    }

    #[test]
    fn auc_matches_pair_counting(seed in any::<u64>()) {
        let err = auc_trial(seed);
        prop_assert!(err < AUC_TOL, "auc error {err:e}");
    }

    #[test]
    fn assignment_matches_exhaustive_search(seed in any::<u64>()) {
        prop_assert!(assignment_trial(seed));
    }
}

#[test]
fn nms_of_empty_input_is_empty() {
    assert!(nms(&[], 0.45).is_empty());
}

#[test]
fn decode_with_confidence_above_one_is_empty() {
    let cfg = DetectorConfig { input_size: 32, ..Default::default() };
    let scales = (0..3).map(|s| Tensor::full([1, 3, 7, cfg.grid_size(s), cfg.grid_size(s)], 30.0)).collect();
    let out = decode(&RawPrediction { scales }, &cfg, 1.01);
    assert_eq!(out.len(), 1);
    assert!(out[0].is_empty());
}

#[test]
fn auc_of_perfect_and_reversed_rankings() {
    let perfect = [(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
    assert_eq!(roc_auc(&perfect).unwrap().1, 1.0);
    let reversed = perfect.map(|(s, p)| (s, !p));
    assert_eq!(roc_auc(&reversed).unwrap().1, 0.0);
    let tied = [(0.5, true), (0.5, false)];
    assert_eq!(roc_auc(&tied).unwrap().1, 0.5);
}
