//! ROI time-series values, per-row normalization, and the plain-CSV matrix
//! format shared by series and connectivity files (one row per line, comma
//! separated, no header).

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;

use crate::error::{EcdiffError, Result};

/// Where a series sits in the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeriesKind {
    /// Toolkit-preprocessed or synthetic ground truth (F0).
    Empirical,
    /// Direct atlas averaging of the 4-d volume (X).
    Rough,
    /// Output of the reverse chain (F0').
    Denoised,
}

/// An N×d matrix of per-ROI signals.
#[derive(Debug, Clone)]
pub struct RoiTimeSeries {
    pub values: Array2<f64>,
    pub kind: SeriesKind,
}

impl RoiTimeSeries {
    pub fn new(values: Array2<f64>, kind: SeriesKind) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EcdiffError::Data("series contains NaN or Inf".into()));
        }
        Ok(Self { values, kind })
    }

    pub fn n_rois(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Per-row z-score; constant rows map to zero rows.
pub fn normalize_series(x: &RoiTimeSeries) -> RoiTimeSeries {
    let d = x.values.ncols() as f64;
    let mut out = x.values.clone();
    for mut row in out.rows_mut() {
        let mean = row.sum() / d;
        let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d;
        if var <= 0.0 {
            row.fill(0.0);
        } else {
            let sd = var.sqrt();
            row.mapv_inplace(|v| (v - mean) / sd);
        }
    }
    RoiTimeSeries { values: out, kind: x.kind }
}

/// Write a matrix as CSV using shortest round-trip float formatting.
pub fn write_matrix_csv(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut text = String::new();
    for row in m.rows() {
        let mut first = true;
        for v in row {
            if !first {
                text.push(',');
            }
            write!(text, "{}", v).unwrap();
            first = false;
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Read a CSV written by [`write_matrix_csv`] (or any headerless numeric CSV
/// with uniform row widths).
pub fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| EcdiffError::Data(format!("cannot read {}: {}", path.display(), e)))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|tok| tok.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| {
            EcdiffError::Data(format!("{}:{}: bad float: {}", path.display(), lineno + 1, e))
        })?;
        if let Some(prev) = rows.first() {
            if prev.len() != row.len() {
                return Err(EcdiffError::Data(format!(
                    "{}: ragged rows ({} vs {})",
                    path.display(),
                    prev.len(),
                    row.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(EcdiffError::Data(format!("{}: empty matrix", path.display())));
    }
    let (n, d) = (rows.len(), rows[0].len());
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((n, d), flat).unwrap())
}
