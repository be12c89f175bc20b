//! Synthetic subject populations with known directed connectivity. Each class
//! gets a sparse zero-diagonal template matrix; subjects perturb it slightly
//! and simulate a lag-1 linear system, so the ground-truth graph is exactly
//! recoverable by lag-1 regression.

use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{EcdiffError, Result};
use crate::ingest::manifest::SubjectRecord;
use crate::ingest::series::{RoiTimeSeries, SeriesKind};
use crate::linalg;

/// Parameters for one synthetic population.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthSpec {
    pub n_rois: usize,
    pub length: usize,
    /// Fraction of off-diagonal entries that carry an edge, in (0, 1].
    pub density: f64,
    pub edge_scale: f64,
    /// Standard deviation of the lag-1 process noise.
    pub noise_sd: f64,
    /// Templates are rescaled so the operator norm stays at or below
    /// 1 - spectral_margin, which bounds the spectral radius.
    pub spectral_margin: f64,
    pub n_subjects_per_class: usize,
    pub class_count: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_rois: 10,
            length: 200,
            density: 0.2,
            edge_scale: 1.0,
            noise_sd: 0.5,
            spectral_margin: 0.1,
            n_subjects_per_class: 20,
            class_count: 2,
            seed: 17,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.n_rois < 2 || self.length < 4 {
            return Err(EcdiffError::Config("need n_rois >= 2 and length >= 4".into()));
        }
        if !(self.density >= 0.0 && self.density <= 1.0) {
            return Err(EcdiffError::Config(format!("density {} outside [0, 1]", self.density)));
        }
        if !(self.spectral_margin > 0.0 && self.spectral_margin < 1.0) {
            return Err(EcdiffError::Config(format!(
                "spectral_margin {} outside (0, 1)",
                self.spectral_margin
            )));
        }
        if self.class_count == 0 || self.n_subjects_per_class == 0 {
            return Err(EcdiffError::Config("need at least one class and one subject".into()));
        }
        Ok(())
    }
}

const BURN_IN: usize = 50;
const ROUGH_NOISE_SD: f64 = 0.4;
const ROUGH_GAIN_SD: f64 = 0.05;
const ROUGH_SMOOTH_WINDOW: usize = 5;
const MAX_TEMPLATE_RETRIES: usize = 8;
const FOLDS: usize = 5;

/// One step of the ground-truth dynamics: z' = Aᵀz + noise.
pub fn simulate_var(
    a: &Array2<f64>,
    z0: &Array1<f64>,
    steps: usize,
    noise_sd: f64,
    rng: &mut impl Rng,
) -> Array2<f64> {
    let n = a.nrows();
    let mut out = Array2::<f64>::zeros((n, steps));
    let mut z = z0.clone();
    for t in 0..steps {
        let mut next = a.t().dot(&z);
        if noise_sd > 0.0 {
            for v in next.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *v += noise_sd * e;
            }
        }
        z = next;
        out.column_mut(t).assign(&z);
    }
    out
}

fn random_sparse_template(
    n: usize,
    density: f64,
    edge_scale: f64,
    margin: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Array2<f64>> {
    // density is the exact fraction of nonzero directed edges
    let k = (density * (n * (n - 1)) as f64).round() as usize;
    if k == 0 {
        return Ok(Array2::zeros((n, n)));
    }
    for _ in 0..MAX_TEMPLATE_RETRIES {
        let mut slots: Vec<(usize, usize)> =
            (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).collect();
        // Fisher-Yates prefix shuffle, take the first k positions
        for idx in 0..k {
            let swap = idx + rng.gen_range(0..slots.len() - idx);
            slots.swap(idx, swap);
        }
        let mut a = Array2::<f64>::zeros((n, n));
        for &(i, j) in slots.iter().take(k) {
            let mag = rng.gen_range(0.5..1.0) * edge_scale;
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            a[[i, j]] = sign * mag;
        }
        rescale_to_margin(&mut a, margin);
        if a.iter().any(|v| !v.is_finite()) {
            continue; // rescaling failure, retry
        }
        return Ok(a);
    }
    Err(EcdiffError::Numerical(format!(
        "failed to draw a non-degenerate template after {} tries",
        MAX_TEMPLATE_RETRIES
    )))
}

fn rescale_to_margin(a: &mut Array2<f64>, margin: f64) {
    let rho = linalg::spectral_radius(a);
    let bound = 1.0 - margin;
    if rho > bound {
        let f = bound / rho;
        a.mapv_inplace(|v| v * f);
    }
}

fn perturb_template(template: &Array2<f64>, margin: f64, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let mut a = template.clone();
    for v in a.iter_mut() {
        if *v != 0.0 {
            let e: f64 = rng.sample(StandardNormal);
            *v *= 1.0 + 0.1 * e;
        }
    }
    rescale_to_margin(&mut a, margin);
    a
}

fn corrupt_to_rough(clean: &Array2<f64>, rng: &mut ChaCha20Rng) -> Array2<f64> {
    let (n, d) = clean.dim();
    // temporally smoothed additive noise
    let raw = Array2::<f64>::from_shape_simple_fn((n, d), || {
        let e: f64 = rng.sample(StandardNormal);
        ROUGH_NOISE_SD * e
    });
    let half = ROUGH_SMOOTH_WINDOW / 2;
    let mut smooth = Array2::<f64>::zeros((n, d));
    for r in 0..n {
        for t in 0..d {
            let lo = t.saturating_sub(half);
            let hi = (t + half + 1).min(d);
            let mut acc = 0.0;
            for k in lo..hi {
                acc += raw[[r, k]];
            }
            smooth[[r, t]] = acc / (hi - lo) as f64;
        }
    }
    // per-ROI multiplicative gain jitter
    let mut rough = clean.clone();
    for r in 0..n {
        let g: f64 = rng.sample(StandardNormal);
        let gain = 1.0 + ROUGH_GAIN_SD * g;
        for t in 0..d {
            rough[[r, t]] = rough[[r, t]] * gain + smooth[[r, t]];
        }
    }
    rough
}

/// Generate the full population. Deterministic in `spec.seed`; each class and
/// each subject draws from its own seeded sub-stream so results do not depend
/// on generation order.
pub fn synth_population(spec: &SynthSpec) -> Result<Vec<SubjectRecord>> {
    spec.validate()?;
    let mut templates = Vec::with_capacity(spec.class_count);
    for k in 0..spec.class_count {
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        rng.set_stream(10_000 + k as u64);
        templates.push(random_sparse_template(
            spec.n_rois,
            spec.density,
            spec.edge_scale,
            spec.spectral_margin,
            &mut rng,
        )?);
    }

    let mut records = Vec::with_capacity(spec.class_count * spec.n_subjects_per_class);
    for k in 0..spec.class_count {
        for s in 0..spec.n_subjects_per_class {
            let global = k * spec.n_subjects_per_class + s;
            let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
            rng.set_stream(20_000 + global as u64);

            let a = perturb_template(&templates[k], spec.spectral_margin, &mut rng);
            let z0 = Array1::from_shape_simple_fn(spec.n_rois, || rng.sample(StandardNormal));
            let traj = simulate_var(&a, &z0, BURN_IN + spec.length, spec.noise_sd, &mut rng);
            let clean = traj.slice(ndarray::s![.., BURN_IN..]).to_owned();
            let rough = corrupt_to_rough(&clean, &mut rng);

            records.push(SubjectRecord {
                id: format!("c{}s{:03}", k, s),
                label: format!("c{}", k),
                rough: RoiTimeSeries::new(rough, SeriesKind::Rough)?,
                clean: Some(RoiTimeSeries::new(clean, SeriesKind::Empirical)?),
                true_bec: Some(a),
                fold: s % FOLDS, // stratified: round-robin within each class
            });
        }
    }
    Ok(records)
}
