//! Group-level connectivity analysis: class averages, stage-to-stage
//! alteration maps, and ROI importance by shielding.

use ndarray::Array2;
use serde::Serialize;

use crate::error::{EcdiffError, Result};
use crate::evaluation::classify::BecClassifier;

/// Entrywise mean over subjects with small-magnitude suppression. Entries with
/// |mean| below `threshold` are zeroed, as is the diagonal.
pub fn group_average_bec(becs: &[Array2<f64>], threshold: f64) -> Result<Array2<f64>> {
    if becs.is_empty() {
        return Err(EcdiffError::Data("no connectivity matrices to average".into()));
    }
    let n = becs[0].nrows();
    let mut avg = Array2::<f64>::zeros((n, n));
    for a in becs {
        if a.dim() != (n, n) {
            return Err(EcdiffError::Shape("mixed connectivity shapes in average".into()));
        }
        avg += a;
    }
    avg /= becs.len() as f64;
    for i in 0..n {
        for j in 0..n {
            if i == j || avg[[i, j]].abs() < threshold {
                avg[[i, j]] = 0.0;
            }
        }
    }
    Ok(avg)
}

/// One ranked directed connection.
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RankedEdge {
    pub source: usize,
    pub target: usize,
    pub delta: f64,
}

/// Difference of class-averaged connectivity (later minus earlier stage) with
/// top-k enhanced (positive) and diminished (negative) connections.
#[derive(Debug, Clone)]
pub struct AlteredConnectivity {
    pub delta: Array2<f64>,
    pub enhanced: Vec<RankedEdge>,
    pub diminished: Vec<RankedEdge>,
}

/// delta = avg_late - avg_early. Ties rank deterministically by
/// (source, target). Only strictly positive / strictly negative entries
/// qualify, so fewer than k may be returned.
pub fn altered_connectivity(
    avg_early: &Array2<f64>,
    avg_late: &Array2<f64>,
    k: usize,
) -> Result<AlteredConnectivity> {
    if avg_early.dim() != avg_late.dim() {
        return Err(EcdiffError::Shape("stage averages differ in shape".into()));
    }
    let delta = avg_late - avg_early;
    let n = delta.nrows();
    let mut entries: Vec<RankedEdge> = Vec::new();
    for source in 0..n {
        for target in 0..n {
            if source != target {
                entries.push(RankedEdge { source, target, delta: delta[[source, target]] });
            }
        }
    }
    let mut enhanced: Vec<RankedEdge> =
        entries.iter().filter(|e| e.delta > 0.0).cloned().collect();
    enhanced.sort_by(|a, b| {
        b.delta
            .partial_cmp(&a.delta)
            .unwrap()
            .then(a.source.cmp(&b.source))
            .then(a.target.cmp(&b.target))
    });
    enhanced.truncate(k);
    let mut diminished: Vec<RankedEdge> =
        entries.iter().filter(|e| e.delta < 0.0).cloned().collect();
    diminished.sort_by(|a, b| {
        a.delta
            .partial_cmp(&b.delta)
            .unwrap()
            .then(a.source.cmp(&b.source))
            .then(a.target.cmp(&b.target))
    });
    diminished.truncate(k);
    Ok(AlteredConnectivity { delta, enhanced, diminished })
}

/// Zero the shielded ROI's row and column (all incoming and outgoing edges).
pub fn shield_roi(a: &Array2<f64>, roi: usize) -> Array2<f64> {
    let mut out = a.clone();
    for j in 0..out.ncols() {
        out[[roi, j]] = 0.0;
    }
    for i in 0..out.nrows() {
        out[[i, roi]] = 0.0;
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct RoiImportance {
    /// 1 - mean accuracy when the ROI is shielded, per ROI.
    pub scores: Vec<f64>,
    /// Indices of the top ⌈N/10⌉ ROIs by score, descending (ties by index).
    pub top: Vec<usize>,
}

/// Shielding importance: for each ROI, zero its row and column in every test
/// matrix, re-score the fixed classifier and record one minus the mean
/// accuracy. Invariant to subject order.
pub fn roi_importance(
    classifier: &dyn BecClassifier,
    test: &[(Array2<f64>, bool)],
) -> Result<RoiImportance> {
    if test.is_empty() {
        return Err(EcdiffError::Data("no test subjects for importance scoring".into()));
    }
    let n = test[0].0.nrows();
    let mut scores = Vec::with_capacity(n);
    for roi in 0..n {
        let mut correct: usize = 0;
        for (a, positive) in test {
            let shielded = shield_roi(a, roi);
            if (classifier.score(&shielded) >= 0.0) == *positive {
                correct += 1;
            }
        }
        scores.push(1.0 - correct as f64 / test.len() as f64);
    }
    let top_count = n.div_ceil(10);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order.truncate(top_count);
    Ok(RoiImportance { scores, top: order })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn single_subject_zero_threshold_is_identity_off_diagonal() {
        let a = array![[0.5, 0.2], [-0.3, 0.9]];
        let avg = group_average_bec(&[a.clone()], 0.0).unwrap();
        assert_eq!(avg[[0, 1]], 0.2);
        assert_eq!(avg[[1, 0]], -0.3);
        assert_eq!(avg[[0, 0]], 0.0); // diagonal forced to zero
    }

    #[test]
    fn threshold_filters_small_means() {
        let a = array![[0.0, 0.09, 0.2], [-0.12, 0.0, 0.05], [0.3, -0.04, 0.0]];
        let avg = group_average_bec(&[a], 0.1).unwrap();
        assert_eq!(avg[[0, 1]], 0.0); // |0.09| < 0.1
        assert_eq!(avg[[0, 2]], 0.2);
        assert_eq!(avg[[1, 0]], -0.12);
        assert_eq!(avg[[2, 1]], 0.0);
    }

    #[test]
    fn averaging_matches_scalar_recomputation() {
        let ms = vec![
            array![[0.0, 1.0], [2.0, 0.0]],
            array![[0.0, 2.0], [4.0, 0.0]],
            array![[0.0, 3.0], [6.0, 0.0]],
        ];
        let avg = group_average_bec(&ms, 0.0).unwrap();
        assert!((avg[[0, 1]] - 2.0).abs() < 1e-15);
        assert!((avg[[1, 0]] - 4.0).abs() < 1e-15);
    }

    #[test]
    fn identical_stages_produce_empty_rankings() {
        let a = array![[0.0, 0.5], [0.25, 0.0]];
        let alt = altered_connectivity(&a, &a, 10).unwrap();
        assert!(alt.enhanced.is_empty());
        assert!(alt.diminished.is_empty());
        assert!(alt.delta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_perturbation_is_the_sole_enhanced_edge() {
        let early = Array2::<f64>::zeros((6, 6));
        let mut late = early.clone();
        late[[2, 5]] = 0.4;
        let alt = altered_connectivity(&early, &late, 10).unwrap();
        assert_eq!(alt.enhanced, vec![RankedEdge { source: 2, target: 5, delta: 0.4 }]);
        assert!(alt.diminished.is_empty());
    }

    #[test]
    fn topk_matches_full_sort() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(2);
        let n = 7;
        let early = Array2::from_shape_simple_fn((n, n), || rng.gen_range(-1.0..1.0));
        let late = Array2::from_shape_simple_fn((n, n), || rng.gen_range(-1.0..1.0));
        let alt = altered_connectivity(&early, &late, 10).unwrap();
        // oracle: full sort of all off-diagonal deltas
        let mut all: Vec<(usize, usize, f64)> = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    all.push((i, j, late[[i, j]] - early[[i, j]]));
                }
            }
        }
        let mut desc = all.clone();
        desc.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap());
        for (rank, e) in alt.enhanced.iter().enumerate() {
            assert_eq!((e.source, e.target), (desc[rank].0, desc[rank].1));
        }
        let mut asc = all;
        asc.sort_by(|a, b| a.2.partial_cmp(&b.2).unwrap());
        for (rank, e) in alt.diminished.iter().enumerate() {
            assert_eq!((e.source, e.target), (asc[rank].0, asc[rank].1));
        }
    }

    struct ConstantClassifier;
    impl BecClassifier for ConstantClassifier {
        fn score(&self, _a: &Array2<f64>) -> f64 {
            1.0
        }
    }

    struct Roi0Classifier;
    impl BecClassifier for Roi0Classifier {
        fn score(&self, a: &Array2<f64>) -> f64 {
            // positive iff ROI 0 has outgoing weight
            if a.row(0).iter().any(|&v| v != 0.0) {
                1.0
            } else {
                -1.0
            }
        }
    }

    #[test]
    fn indifferent_classifier_gives_equal_importance() {
        let test: Vec<(Array2<f64>, bool)> = (0..4)
            .map(|i| (Array2::from_elem((5, 5), i as f64 * 0.1), i % 2 == 0))
            .collect();
        let imp = roi_importance(&ConstantClassifier, &test).unwrap();
        for w in imp.scores.windows(2) {
            assert_eq!(w[0], w[1]);
        }
        assert_eq!(imp.top.len(), 1); // ceil(5/10)
    }

    #[test]
    fn class_difference_on_roi0_ranks_it_first() {
        let mut pos = Array2::<f64>::zeros((5, 5));
        pos[[0, 3]] = 0.8; // signal lives on ROI 0's outgoing edge
        let neg = Array2::<f64>::zeros((5, 5));
        let test = vec![(pos.clone(), true), (neg.clone(), false), (pos, true), (neg, false)];
        let imp = roi_importance(&Roi0Classifier, &test).unwrap();
        assert_eq!(imp.top[0], 0);
        assert!(imp.scores[0] > imp.scores[1]);
    }

    #[test]
    fn ninety_rois_report_nine_top() {
        let test: Vec<(Array2<f64>, bool)> =
            vec![(Array2::zeros((90, 90)), true), (Array2::zeros((90, 90)), false)];
        let imp = roi_importance(&ConstantClassifier, &test).unwrap();
        assert_eq!(imp.top.len(), 9);
    }
}
