//! Downstream classifiers over connectivity matrices: a linear max-margin
//! model on off-diagonal features and a small convolution-over-rows network.
//! Both train deterministically from a seed.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{EcdiffError, Result};
use crate::evaluation::metrics::{binary_metrics, FoldMetrics, MetricsReport};
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::training::optim::Adam;

/// A trained binary scorer: positive score predicts the positive class.
pub trait BecClassifier {
    fn score(&self, a: &Array2<f64>) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassifierKind {
    LinearMargin,
    ConnectivityCnn,
}

impl std::str::FromStr for ClassifierKind {
    type Err = EcdiffError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear-margin" => Ok(Self::LinearMargin),
            "connectivity-cnn" => Ok(Self::ConnectivityCnn),
            other => Err(EcdiffError::Config(format!(
                "unknown classifier '{}', expected linear-margin or connectivity-cnn",
                other
            ))),
        }
    }
}

/// One labeled training/evaluation example.
#[derive(Debug, Clone)]
pub struct BecSample {
    pub a: Array2<f64>,
    pub positive: bool,
    pub fold: usize,
}

fn offdiag_features(a: &Array2<f64>) -> Vec<f64> {
    let n = a.nrows();
    let mut out = Vec::with_capacity(n * (n - 1));
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out.push(a[[i, j]]);
            }
        }
    }
    out
}

/// Hinge-loss linear classifier with L2 regularization, trained by full-batch
/// subgradient descent on standardized off-diagonal features.
pub struct LinearMargin {
    w: Vec<f64>,
    b: f64,
    feat_mean: Vec<f64>,
    feat_sd: Vec<f64>,
}

impl LinearMargin {
    pub fn fit(train: &[&BecSample]) -> Result<Self> {
        if train.is_empty() {
            return Err(EcdiffError::Data("empty training set".into()));
        }
        let feats: Vec<Vec<f64>> = train.iter().map(|s| offdiag_features(&s.a)).collect();
        let ys: Vec<f64> = train.iter().map(|s| if s.positive { 1.0 } else { -1.0 }).collect();
        let dim = feats[0].len();
        let m = feats.len() as f64;

        let mut mean = vec![0.0; dim];
        for f in &feats {
            for (acc, v) in mean.iter_mut().zip(f) {
                *acc += v / m;
            }
        }
        let mut sd = vec![0.0; dim];
        for f in &feats {
            for ((acc, v), mu) in sd.iter_mut().zip(f).zip(&mean) {
                *acc += (v - mu) * (v - mu) / m;
            }
        }
        for s in sd.iter_mut() {
            *s = s.sqrt().max(1e-9);
        }
        let std_feats: Vec<Vec<f64>> = feats
            .iter()
            .map(|f| f.iter().zip(&mean).zip(&sd).map(|((v, mu), s)| (v - mu) / s).collect())
            .collect();

        let mut w = vec![0.0; dim];
        let mut b = 0.0;
        let l2 = 5e-2;
        let iters = 2000;
        for it in 0..iters {
            let lr = 1.0 / (1.0 + it as f64 * 0.01);
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (f, &y) in std_feats.iter().zip(&ys) {
                let margin = y * (dot(&w, f) + b);
                if margin < 1.0 {
                    for (g, v) in gw.iter_mut().zip(f) {
                        *g -= y * v / m;
                    }
                    gb -= y / m;
                }
            }
            for (wi, gi) in w.iter_mut().zip(&gw) {
                *wi -= lr * (gi + l2 * *wi);
            }
            b -= lr * gb;
        }
        Ok(Self { w, b, feat_mean: mean, feat_sd: sd })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl BecClassifier for LinearMargin {
    fn score(&self, a: &Array2<f64>) -> f64 {
        let f = offdiag_features(a);
        let std: Vec<f64> = f
            .iter()
            .zip(&self.feat_mean)
            .zip(&self.feat_sd)
            .map(|((v, mu), s)| (v - mu) / s)
            .collect();
        dot(&self.w, &std) + self.b
    }
}

/// Convolution-over-rows network: a width-3 kernel bank over each row of the
/// matrix, GELU, per-row average pooling, then a linear head. Stands in for a
/// heavier connectivity-specific network at desk scale.
pub struct ConnectivityCnn {
    store: ParamStore,
    conv_w: usize,
    conv_b: usize,
    head_w: usize,
    head_b: usize,
    n_rois: usize,
    channels: usize,
}

const CNN_CHANNELS: usize = 4;
const CNN_EPOCHS: usize = 150;

impl ConnectivityCnn {
    fn forward_score(&self, store: &ParamStore, a: &Array2<f64>) -> f64 {
        let tape = Tape::new();
        let b = store.bind(&tape);
        let v = self.logit(&tape, &b, a);
        v.item()
    }

    fn logit<'t>(
        &self,
        tape: &'t Tape,
        b: &crate::params::Binding<'t>,
        a: &Array2<f64>,
    ) -> crate::tape::Var<'t> {
        let n = self.n_rois;
        let x = tape.leaf2(a.clone()).reshape(&[1, n, n]);
        let h = crate::tape::conv1d(x, b.var(self.conv_w), b.var(self.conv_b), 1).gelu();
        // per (channel, row) mean over positions
        let flat = h.reshape(&[self.channels * n, n]);
        let pooled = flat.transpose().mean_rows(); // [channels*n]
        pooled.dot_vec(b.var(self.head_w)).add(b.var(self.head_b))
    }

    pub fn fit(train: &[&BecSample], seed: u64) -> Result<Self> {
        if train.is_empty() {
            return Err(EcdiffError::Data("empty training set".into()));
        }
        let n = train[0].a.nrows();
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        rng.set_stream(8);
        let conv_w = store.add(
            "cnn.conv.w",
            crate::params::xavier_shaped(&mut rng, &[CNN_CHANNELS, 1, 3], 3, CNN_CHANNELS * 3),
        );
        let conv_b = store.add("cnn.conv.b", crate::params::zeros(&[CNN_CHANNELS]));
        let head_w = store.add("cnn.head.w", crate::params::xavier2(&mut rng, CNN_CHANNELS * n, 1));
        let head_b = store.add("cnn.head.b", crate::params::zeros(&[]));
        // head_w registered as a matrix for init scaling; flatten to a vector
        let flat = store.value(head_w).iter().cloned().collect::<Vec<f64>>();
        *store.value_mut(head_w) =
            crate::tape::Arr::from_shape_vec(ndarray::IxDyn(&[CNN_CHANNELS * n]), flat).unwrap();

        let mut model = Self { store, conv_w, conv_b, head_w, head_b, n_rois: n, channels: CNN_CHANNELS };
        let pids: Vec<usize> = vec![model.conv_w, model.conv_b, model.head_w, model.head_b];
        let mut adam = Adam::new(0.01, pids, &model.store);

        for _ in 0..CNN_EPOCHS {
            let n_params = model.store.len();
            let mut grads: Vec<Option<crate::tape::Arr>> =
                std::iter::repeat_with(|| None).take(n_params).collect();
            for s in train {
                let tape = Tape::new();
                let b = model.store.bind(&tape);
                let logit = model.logit(&tape, &b, &s.a);
                let p = logit.sigmoid_bounded(1e-7);
                // binary cross-entropy
                let loss = if s.positive {
                    p.ln().scale(-1.0)
                } else {
                    p.scale(-1.0).add_scalar(1.0).ln().scale(-1.0)
                };
                let g = tape.backward(loss);
                for pid in 0..n_params {
                    if let Some(gr) = g.wrt(b.var(pid)) {
                        match &mut grads[pid] {
                            Some(acc) => *acc += gr,
                            slot => *slot = Some(gr.clone()),
                        }
                    }
                }
            }
            let scale = 1.0 / train.len() as f64;
            for g in grads.iter_mut().flatten() {
                g.mapv_inplace(|v| v * scale);
            }
            adam.step(&mut model.store, &grads);
        }
        Ok(model)
    }
}

impl BecClassifier for ConnectivityCnn {
    fn score(&self, a: &Array2<f64>) -> f64 {
        self.forward_score(&self.store, a)
    }
}

/// Fit the chosen classifier on the training folds and score each test fold;
/// returns per-fold metrics plus the classifier retrained on each fold's
/// complement (fold index order).
pub fn downstream_classify(
    samples: &[BecSample],
    kind: ClassifierKind,
    seed: u64,
) -> Result<(MetricsReport, Vec<Box<dyn BecClassifier>>)> {
    if samples.is_empty() {
        return Err(EcdiffError::Data("no samples to classify".into()));
    }
    let max_fold = samples.iter().map(|s| s.fold).max().unwrap();
    let mut per_fold: Vec<FoldMetrics> = Vec::new();
    let mut classifiers: Vec<Box<dyn BecClassifier>> = Vec::new();
    for fold in 0..=max_fold {
        let train: Vec<&BecSample> = samples.iter().filter(|s| s.fold != fold).collect();
        let test: Vec<&BecSample> = samples.iter().filter(|s| s.fold == fold).collect();
        if test.is_empty() {
            continue;
        }
        let clf: Box<dyn BecClassifier> = match kind {
            ClassifierKind::LinearMargin => Box::new(LinearMargin::fit(&train)?),
            ClassifierKind::ConnectivityCnn => Box::new(ConnectivityCnn::fit(&train, seed)?),
        };
        let scores: Vec<f64> = test.iter().map(|s| clf.score(&s.a)).collect();
        let labels: Vec<bool> = test.iter().map(|s| s.positive).collect();
        per_fold.push(binary_metrics(&scores, &labels));
        classifiers.push(clf);
    }
    Ok((MetricsReport::from_folds(per_fold), classifiers))
}
