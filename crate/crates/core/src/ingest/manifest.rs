//! Subject manifests: a CSV index (`id,label,rough_path,clean_path,
//! true_bec_path,fold`) next to per-subject series/connectivity CSVs. Paths
//! are stored relative to the manifest file.

use std::path::{Path, PathBuf};

use ndarray::Array2;

use crate::error::{EcdiffError, Result};
use crate::ingest::series::{read_matrix_csv, write_matrix_csv, RoiTimeSeries, SeriesKind};

/// One subject: conditioning series, optional training target, optional known
/// ground-truth connectivity, and its cross-validation fold.
#[derive(Debug, Clone)]
pub struct SubjectRecord {
    pub id: String,
    pub label: String,
    pub rough: RoiTimeSeries,
    pub clean: Option<RoiTimeSeries>,
    pub true_bec: Option<Array2<f64>>,
    pub fold: usize,
}

const HEADER: [&str; 6] = ["id", "label", "rough_path", "clean_path", "true_bec_path", "fold"];

/// Write records and their matrices under the manifest's directory, one
/// subdirectory per class label, files named `<kind>_<id>.csv`. The manifest
/// lists paths relative to itself. Returns the manifest path.
pub fn save_manifest(records: &[SubjectRecord], manifest_path: &Path) -> Result<PathBuf> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(manifest_path)
        .map_err(|e| EcdiffError::Data(format!("cannot write manifest: {}", e)))?;
    w.write_record(HEADER).map_err(|e| EcdiffError::Data(e.to_string()))?;
    for r in records {
        std::fs::create_dir_all(dir.join(&r.label))?;
        let rough_name = format!("{}/rough_{}.csv", r.label, r.id);
        write_matrix_csv(&dir.join(&rough_name), &r.rough.values)?;
        let clean_name = match &r.clean {
            Some(c) => {
                let name = format!("{}/clean_{}.csv", r.label, r.id);
                write_matrix_csv(&dir.join(&name), &c.values)?;
                name
            }
            None => String::new(),
        };
        let bec_name = match &r.true_bec {
            Some(a) => {
                let name = format!("{}/truebec_{}.csv", r.label, r.id);
                write_matrix_csv(&dir.join(&name), a)?;
                name
            }
            None => String::new(),
        };
        w.write_record([
            r.id.as_str(),
            r.label.as_str(),
            rough_name.as_str(),
            clean_name.as_str(),
            bec_name.as_str(),
            &r.fold.to_string(),
        ])
        .map_err(|e| EcdiffError::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(manifest_path.to_path_buf())
}

/// Load a manifest and every matrix it references. `allowed_labels`, when
/// given, restricts the label column. All subjects must agree on N and d.
pub fn load_manifest(
    manifest_path: &Path,
    allowed_labels: Option<&[String]>,
) -> Result<Vec<SubjectRecord>> {
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(manifest_path)
        .map_err(|e| EcdiffError::Data(format!("cannot read {}: {}", manifest_path.display(), e)))?;
    {
        let got = rdr.headers().map_err(|e| EcdiffError::Data(e.to_string()))?;
        let want: Vec<&str> = HEADER.to_vec();
        if got.iter().collect::<Vec<_>>() != want {
            return Err(EcdiffError::Data(format!(
                "manifest header {:?} does not match {:?}",
                got, want
            )));
        }
    }

    let mut records = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for row in rdr.records() {
        let row = row.map_err(|e| EcdiffError::Data(e.to_string()))?;
        let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();
        let id = field(0);
        let label = field(1);
        if let Some(allowed) = allowed_labels {
            if !allowed.iter().any(|l| *l == label) {
                return Err(EcdiffError::Data(format!(
                    "subject {}: label '{}' outside configured class set {:?}",
                    id, label, allowed
                )));
            }
        }
        let rough_path = field(2);
        if rough_path.is_empty() {
            return Err(EcdiffError::Data(format!("subject {}: missing rough_path", id)));
        }
        let rough = read_matrix_csv(&dir.join(&rough_path))
            .map_err(|e| EcdiffError::Data(format!("subject {}: {}", id, e)))?;
        let clean_path = field(3);
        let clean = if clean_path.is_empty() {
            None
        } else {
            Some(
                read_matrix_csv(&dir.join(&clean_path))
                    .map_err(|e| EcdiffError::Data(format!("subject {}: {}", id, e)))?,
            )
        };
        let bec_path = field(4);
        let true_bec = if bec_path.is_empty() {
            None
        } else {
            Some(
                read_matrix_csv(&dir.join(&bec_path))
                    .map_err(|e| EcdiffError::Data(format!("subject {}: {}", id, e)))?,
            )
        };
        let fold: usize = field(5)
            .parse()
            .map_err(|_| EcdiffError::Data(format!("subject {}: bad fold '{}'", id, field(5))))?;

        let dim = rough.dim();
        if let Some(c) = &clean {
            if c.dim() != dim {
                return Err(EcdiffError::Shape(format!(
                    "subject {}: clean shape {:?} != rough shape {:?}",
                    id,
                    c.dim(),
                    dim
                )));
            }
        }
        match shape {
            None => shape = Some(dim),
            Some(s) if s != dim => {
                return Err(EcdiffError::Shape(format!(
                    "subject {}: shape {:?} inconsistent with earlier subjects {:?}",
                    id, dim, s
                )))
            }
            _ => {}
        }
        if let Some(a) = &true_bec {
            if a.dim() != (dim.0, dim.0) {
                return Err(EcdiffError::Shape(format!(
                    "subject {}: connectivity shape {:?} is not {}x{}",
                    id,
                    a.dim(),
                    dim.0,
                    dim.0
                )));
            }
        }
        records.push(SubjectRecord {
            id,
            label,
            rough: RoiTimeSeries::new(rough, SeriesKind::Rough)?,
            clean: clean.map(|c| RoiTimeSeries::new(c, SeriesKind::Empirical)).transpose()?,
            true_bec,
            fold,
        });
    }
    Ok(records)
}

/// Distinct labels in manifest order.
pub fn class_labels(records: &[SubjectRecord]) -> Vec<String> {
    let mut labels = Vec::new();
    for r in records {
        if !labels.contains(&r.label) {
            labels.push(r.label.clone());
        }
    }
    labels
}
