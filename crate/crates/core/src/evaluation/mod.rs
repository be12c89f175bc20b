//! Cross-validated classification metrics, group-level connectivity analysis,
//! and ROI-importance scoring.

pub mod analysis;
pub mod classify;
pub mod metrics;

pub use analysis::{
    altered_connectivity, group_average_bec, roi_importance, shield_roi, AlteredConnectivity,
    RankedEdge, RoiImportance,
};
pub use classify::{downstream_classify, BecClassifier, BecSample, ClassifierKind};
pub use metrics::{
    binary_metrics, classification_metrics, edge_auroc, kfold_split, FoldMetrics, MetricsReport,
};
