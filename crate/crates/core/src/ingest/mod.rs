//! Data ingestion: ROI series from 4-d volumes, synthetic populations with a
//! known causal oracle, and manifest IO.

pub mod atlas;
pub mod manifest;
pub mod series;
pub mod synth;

pub use atlas::{extract_roi_series, load_atlas, load_volume4d, AtlasMask};
pub use manifest::{class_labels, load_manifest, save_manifest, SubjectRecord};
pub use series::{normalize_series, read_matrix_csv, write_matrix_csv, RoiTimeSeries, SeriesKind};
pub use synth::{simulate_var, synth_population, SynthSpec};
