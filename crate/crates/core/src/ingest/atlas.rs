//! Atlas-based ROI averaging of 4-d volumes (the "rough sample" path) and
//! NIfTI-1 loading.

use std::collections::HashSet;
use std::path::Path;

use ndarray::{Array3, Array4, Ix3, Ix4};
use nifti::{IntoNdArray, NiftiObject, ReaderOptions};

use crate::error::{EcdiffError, Result};
use crate::ingest::series::{RoiTimeSeries, SeriesKind};

/// Integer-labeled parcellation volume. Label 0 is background; ROI labels run
/// 1..=n_labels and each must occupy at least one voxel.
#[derive(Debug, Clone)]
pub struct AtlasMask {
    pub labels: Array3<i32>,
    pub n_labels: usize,
}

impl AtlasMask {
    pub fn new(labels: Array3<i32>) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut max = 0;
        for &v in labels.iter() {
            if v < 0 {
                return Err(EcdiffError::Data(format!("negative atlas label {}", v)));
            }
            seen.insert(v);
            max = max.max(v);
        }
        if max == 0 {
            return Err(EcdiffError::Data("atlas has no nonzero labels".into()));
        }
        for l in 1..=max {
            if !seen.contains(&l) {
                return Err(EcdiffError::Data(format!(
                    "atlas label {} has no voxels (labels must be contiguous 1..{})",
                    l, max
                )));
            }
        }
        Ok(Self { labels, n_labels: max as usize })
    }
}

/// Average voxels per label at each retained time point. The first `discard`
/// volumes are dropped; output is n_labels × (t_len - discard).
pub fn extract_roi_series(
    volume: &Array4<f64>,
    atlas: &AtlasMask,
    discard: usize,
) -> Result<RoiTimeSeries> {
    let (x, y, z, t_len) = volume.dim();
    if atlas.labels.dim() != (x, y, z) {
        return Err(EcdiffError::Shape(format!(
            "volume spatial dims {:?} do not match atlas dims {:?}",
            (x, y, z),
            atlas.labels.dim()
        )));
    }
    if t_len <= discard {
        return Err(EcdiffError::Data(format!(
            "volume has {} time points, cannot discard {}",
            t_len, discard
        )));
    }
    let n = atlas.n_labels;
    let d = t_len - discard;

    let mut counts = vec![0usize; n];
    for &l in atlas.labels.iter() {
        if l > 0 {
            counts[(l - 1) as usize] += 1;
        }
    }

    let mut out = ndarray::Array2::<f64>::zeros((n, d));
    for (ti, col) in (discard..t_len).enumerate() {
        for xi in 0..x {
            for yi in 0..y {
                for zi in 0..z {
                    let l = atlas.labels[[xi, yi, zi]];
                    if l > 0 {
                        out[[(l - 1) as usize, ti]] += volume[[xi, yi, zi, col]];
                    }
                }
            }
        }
        for (r, &c) in counts.iter().enumerate() {
            out[[r, ti]] /= c as f64;
        }
    }
    RoiTimeSeries::new(out, SeriesKind::Rough)
}

/// Load a 4-d NIfTI-1 volume as x,y,z,t.
pub fn load_volume4d(path: &Path) -> Result<Array4<f64>> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| EcdiffError::Data(format!("cannot read {}: {}", path.display(), e)))?;
    let vol = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| EcdiffError::Data(format!("{}: {}", path.display(), e)))?;
    vol.into_dimensionality::<Ix4>()
        .map_err(|_| EcdiffError::Shape(format!("{}: expected a 4-d volume", path.display())))
}

/// Load an integer-labeled 3-d NIfTI-1 atlas.
pub fn load_atlas(path: &Path) -> Result<AtlasMask> {
    let obj = ReaderOptions::new()
        .read_file(path)
        .map_err(|e| EcdiffError::Data(format!("cannot read {}: {}", path.display(), e)))?;
    let vol = obj
        .into_volume()
        .into_ndarray::<f64>()
        .map_err(|e| EcdiffError::Data(format!("{}: {}", path.display(), e)))?;
    let vol3 = vol
        .into_dimensionality::<Ix3>()
        .map_err(|_| EcdiffError::Shape(format!("{}: expected a 3-d atlas", path.display())))?;
    let mut labels = Array3::<i32>::zeros(vol3.dim());
    for (dst, &src) in labels.iter_mut().zip(vol3.iter()) {
        if (src - src.round()).abs() > 1e-6 {
            return Err(EcdiffError::Data(format!(
                "{}: atlas voxel value {} is not an integer label",
                path.display(),
                src
            )));
        }
        *dst = src.round() as i32;
    }
    AtlasMask::new(labels)
}
