//! Cross-validation folds and binary classification metrics.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use crate::error::{EcdiffError, Result};
use crate::ingest::SubjectRecord;

/// ACC/SEN/SPE/AUC of one fold. AUC is absent when the fold holds a single
/// class (it is undefined there).
#[derive(Debug, Clone, Serialize)]
pub struct FoldMetrics {
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
    pub auc: Option<f64>,
}

/// Per-fold metrics and their mean.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub per_fold: Vec<FoldMetrics>,
    pub mean: FoldMetrics,
}

impl MetricsReport {
    pub fn from_folds(per_fold: Vec<FoldMetrics>) -> Self {
        let n = per_fold.len() as f64;
        let mean_of = |f: &dyn Fn(&FoldMetrics) -> f64| per_fold.iter().map(f).sum::<f64>() / n;
        let aucs: Vec<f64> = per_fold.iter().filter_map(|m| m.auc).collect();
        let mean = FoldMetrics {
            acc: mean_of(&|m| m.acc),
            sen: mean_of(&|m| m.sen),
            spe: mean_of(&|m| m.spe),
            auc: if aucs.is_empty() {
                None
            } else {
                Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
            },
        };
        Self { per_fold, mean }
    }
}

/// Stratified k-fold assignment: within each class, subjects are shuffled by
/// the seed and dealt round-robin, so per-class fold sizes differ by at most
/// one. Returns the records with fold labels rewritten.
pub fn kfold_split(
    mut records: Vec<SubjectRecord>,
    k: usize,
    seed: u64,
) -> Result<Vec<SubjectRecord>> {
    if k < 2 {
        return Err(EcdiffError::Config("need at least 2 folds".into()));
    }
    let mut by_class: std::collections::BTreeMap<String, Vec<usize>> = Default::default();
    for (i, r) in records.iter().enumerate() {
        by_class.entry(r.label.clone()).or_default().push(i);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(7);
    for (label, mut idxs) in by_class {
        if idxs.len() < k {
            return Err(EcdiffError::Config(format!(
                "class '{}' has {} members, fewer than {} folds",
                label,
                idxs.len(),
                k
            )));
        }
        idxs.shuffle(&mut rng);
        for (pos, &i) in idxs.iter().enumerate() {
            records[i].fold = pos % k;
        }
    }
    Ok(records)
}

/// Metrics for one set of decision scores. `labels[i]` marks the positive
/// class; prediction threshold is score >= 0. AUC uses the rank statistic with
/// ties contributing 1/2.
pub fn binary_metrics(scores: &[f64], labels: &[bool]) -> FoldMetrics {
    assert_eq!(scores.len(), labels.len());
    let mut tp = 0.0;
    let mut tn = 0.0;
    let mut fp = 0.0;
    let mut fnn = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        let pred = s >= 0.0;
        match (pred, y) {
            (true, true) => tp += 1.0,
            (false, false) => tn += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fnn += 1.0,
        }
    }
    let total = scores.len() as f64;
    let pos = tp + fnn;
    let neg = tn + fp;
    let acc = (tp + tn) / total;
    let sen = if pos > 0.0 { tp / pos } else { 0.0 };
    let spe = if neg > 0.0 { tn / neg } else { 0.0 };
    let auc = if pos > 0.0 && neg > 0.0 { Some(rank_auc(scores, labels)) } else { None };
    FoldMetrics { acc, sen, spe, auc }
}

/// Mann-Whitney AUC via average ranks.
fn rank_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = n as f64 - pos;
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg)
}

/// Per-fold binary metrics from scores, labels and fold assignments.
pub fn classification_metrics(
    scores: &[f64],
    labels: &[bool],
    folds: &[usize],
) -> Result<MetricsReport> {
    if scores.len() != labels.len() || scores.len() != folds.len() {
        return Err(EcdiffError::Shape("scores, labels and folds must align".into()));
    }
    let max_fold = *folds.iter().max().unwrap_or(&0);
    let mut per_fold = Vec::new();
    for f in 0..=max_fold {
        let idx: Vec<usize> = (0..scores.len()).filter(|&i| folds[i] == f).collect();
        if idx.is_empty() {
            continue;
        }
        let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
        let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        per_fold.push(binary_metrics(&s, &l));
    }
    Ok(MetricsReport::from_folds(per_fold))
}

/// Edge-detection AUROC: |estimate| entries scored against the true nonzero
/// pattern, off-diagonal only.
pub fn edge_auroc(estimate: &ndarray::Array2<f64>, truth: &ndarray::Array2<f64>) -> Option<f64> {
    let n = estimate.nrows();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                scores.push(estimate[[i, j]].abs());
                labels.push(truth[[i, j]] != 0.0);
            }
        }
    }
    let pos = labels.iter().filter(|&&y| y).count();
    if pos == 0 || pos == labels.len() {
        return None;
    }
    Some(rank_auc(&scores, &labels))
}
