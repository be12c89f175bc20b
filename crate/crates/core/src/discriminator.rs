//! Multi-resolution transformer discriminator: scores whether a series at a
//! given diffusion step came from the forward chain (real) or the generator
//! (fake). Four sub-discriminators see the input average-pooled along time at
//! factors 1, 2, 4 and 8; the final score is their mean, strictly in (0, 1).

use ndarray::Array2;
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{EcdiffError, Result};
use crate::generator::timestep_embedding;
use crate::params::{ones, xavier2, zeros, Binding, ParamId, ParamStore};
use crate::tape::{avg_pool2_rows, concat_cols, norm_rows, Tape, Var};

pub const N_SCALES: usize = 4;

/// Output squeeze keeping scores strictly inside (0, 1).
const SCORE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub n_rois: usize,
    pub length: usize,
    pub heads: usize,
    pub embed_dim: usize,
    /// Ablation: keep only the full-resolution sub-discriminator.
    #[serde(default)]
    pub single_scale: bool,
    /// Optional timestep conditioning (off by default; the adversarial loss
    /// scores samples alone).
    #[serde(default)]
    pub time_conditioning: bool,
    #[serde(default = "default_time_dim")]
    pub timestep_embed_dim: usize,
}

fn default_time_dim() -> usize {
    16
}

impl DiscriminatorConfig {
    pub fn desk(n_rois: usize, length: usize) -> Self {
        Self {
            n_rois,
            length,
            heads: 2,
            embed_dim: 16,
            single_scale: false,
            time_conditioning: false,
            timestep_embed_dim: default_time_dim(),
        }
    }

    pub fn n_scales(&self) -> usize {
        if self.single_scale {
            1
        } else {
            N_SCALES
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(EcdiffError::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        let lengths = pyramid_lengths(self.length, self.n_scales());
        if *lengths.last().unwrap() < 2 {
            return Err(EcdiffError::Config(format!(
                "length {} too small for {} scales (coarsest would be {})",
                self.length,
                self.n_scales(),
                lengths.last().unwrap()
            )));
        }
        if self.time_conditioning && self.timestep_embed_dim % 2 != 0 {
            return Err(EcdiffError::Config("timestep_embed_dim must be even".into()));
        }
        Ok(())
    }
}

/// Lengths of the time axis after repeated ⌈·/2⌉ pooling.
pub fn pyramid_lengths(d: usize, n_scales: usize) -> Vec<usize> {
    let mut lengths = Vec::with_capacity(n_scales);
    let mut cur = d;
    for _ in 0..n_scales {
        lengths.push(cur);
        cur = cur.div_ceil(2);
    }
    lengths
}

/// Average-pooled views of `f` at every scale, coarsest last.
pub fn downsample_pyramid<'t>(f: Var<'t>, n_scales: usize) -> Vec<Var<'t>> {
    let mut scales = Vec::with_capacity(n_scales);
    let mut cur = f;
    for s in 0..n_scales {
        if s > 0 {
            cur = avg_pool2_rows(cur);
        }
        scales.push(cur);
    }
    scales
}

struct SubDiscriminator {
    w_in: ParamId,
    b_in: ParamId,
    norm1_gain: ParamId,
    norm1_bias: ParamId,
    attn: Vec<(ParamId, ParamId, ParamId)>,
    norm2_gain: ParamId,
    norm2_bias: ParamId,
    ffn_w1: ParamId,
    ffn_b1: ParamId,
    ffn_w2: ParamId,
    ffn_b2: ParamId,
    head_w: ParamId,
    head_b: ParamId,
    time_w: Option<ParamId>,
    scale: f64,
}

impl SubDiscriminator {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_len: usize,
        cfg: &DiscriminatorConfig,
        rng: &mut dyn RngCore,
    ) -> Self {
        let e = cfg.embed_dim;
        let head_dim = e / cfg.heads;
        let attn = (0..cfg.heads)
            .map(|h| {
                (
                    store.add(format!("{prefix}.attn.h{h}.wq"), xavier2(rng, e, head_dim)),
                    store.add(format!("{prefix}.attn.h{h}.wk"), xavier2(rng, e, head_dim)),
                    store.add(format!("{prefix}.attn.h{h}.wv"), xavier2(rng, e, head_dim)),
                )
            })
            .collect();
        Self {
            w_in: store.add(format!("{prefix}.in.w"), xavier2(rng, in_len, e)),
            b_in: store.add(format!("{prefix}.in.b"), zeros(&[e])),
            norm1_gain: store.add(format!("{prefix}.norm1.gain"), ones(&[e])),
            norm1_bias: store.add(format!("{prefix}.norm1.bias"), zeros(&[e])),
            attn,
            norm2_gain: store.add(format!("{prefix}.norm2.gain"), ones(&[e])),
            norm2_bias: store.add(format!("{prefix}.norm2.bias"), zeros(&[e])),
            ffn_w1: store.add(format!("{prefix}.ffn.w1"), xavier2(rng, e, 2 * e)),
            ffn_b1: store.add(format!("{prefix}.ffn.b1"), zeros(&[2 * e])),
            ffn_w2: store.add(format!("{prefix}.ffn.w2"), xavier2(rng, 2 * e, e)),
            ffn_b2: store.add(format!("{prefix}.ffn.b2"), zeros(&[e])),
            head_w: store.add(format!("{prefix}.head.w"), zeros(&[e])),
            head_b: store.add(format!("{prefix}.head.b"), zeros(&[])),
            time_w: cfg
                .time_conditioning
                .then(|| store.add(format!("{prefix}.time.w"), xavier2(rng, cfg.timestep_embed_dim, e))),
            scale: (head_dim as f64).sqrt(),
        }
    }

    /// norm → self-attention over ROIs → feed-forward → mean-pooled logistic
    /// head; output strictly inside (0, 1).
    fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>, t: Option<usize>, time_dim: usize) -> Var<'t> {
        let tape = x.tape();
        let mut h = x.matmul(b.var(self.w_in)).add_row_vector(b.var(self.b_in)).gelu();
        if let (Some(w), Some(t)) = (self.time_w, t) {
            let emb = timestep_embedding(t, time_dim);
            let emb = tape.leaf(emb.into_shape(ndarray::IxDyn(&[1, time_dim])).unwrap());
            let tv = emb.matmul(b.var(w)).reshape(&[b.var(w).shape()[1]]);
            h = h.add_row_vector(tv);
        }

        let normed = norm_rows(h, b.var(self.norm1_gain), b.var(self.norm1_bias), 1e-5);
        let heads: Vec<Var> = self
            .attn
            .iter()
            .map(|&(wq, wk, wv)| {
                let q = normed.matmul(b.var(wq));
                let k = normed.matmul(b.var(wk));
                let v = normed.matmul(b.var(wv));
                let scores = q.matmul(k.transpose()).scale(1.0 / self.scale);
                scores.softmax_rows().matmul(v)
            })
            .collect();
        let attn_out = if heads.len() == 1 { heads[0] } else { concat_cols(tape, &heads) };
        let h = attn_out.add(h);

        let normed = norm_rows(h, b.var(self.norm2_gain), b.var(self.norm2_bias), 1e-5);
        let ff = normed
            .matmul(b.var(self.ffn_w1))
            .add_row_vector(b.var(self.ffn_b1))
            .gelu()
            .matmul(b.var(self.ffn_w2))
            .add_row_vector(b.var(self.ffn_b2));
        let h = ff.add(h);

        let pooled = h.mean_rows();
        let logit = pooled.dot_vec(b.var(self.head_w)).add(b.var(self.head_b));
        logit.sigmoid_bounded(SCORE_EPS)
    }
}

pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    subs: Vec<SubDiscriminator>,
    param_range: (usize, usize),
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, store: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let start = store.len();
        let lengths = pyramid_lengths(cfg.length, cfg.n_scales());
        let subs = lengths
            .iter()
            .enumerate()
            .map(|(s, &len)| SubDiscriminator::new(store, &format!("d.s{s}"), len, &cfg, rng))
            .collect();
        let end = store.len();
        Ok(Self { cfg, subs, param_range: (start, end) })
    }

    pub fn param_ids(&self) -> std::ops::Range<ParamId> {
        self.param_range.0..self.param_range.1
    }

    /// Mean of the per-scale scores.
    pub fn forward<'t>(
        &self,
        _tape: &'t Tape,
        b: &Binding<'t>,
        f: Var<'t>,
        t: Option<usize>,
    ) -> Result<Var<'t>> {
        let shape = f.shape();
        if shape != vec![self.cfg.n_rois, self.cfg.length] {
            return Err(EcdiffError::Shape(format!(
                "discriminator expects {}x{}, got {:?}",
                self.cfg.n_rois, self.cfg.length, shape
            )));
        }
        let scales = downsample_pyramid(f, self.cfg.n_scales());
        let mut sum: Option<Var> = None;
        for (sub, scale_input) in self.subs.iter().zip(scales) {
            let score = sub.forward(b, scale_input, t, self.cfg.timestep_embed_dim);
            sum = Some(match sum {
                Some(acc) => acc.add(score),
                None => score,
            });
        }
        Ok(sum.unwrap().scale(1.0 / self.subs.len() as f64))
    }

    /// Convenience scalar scoring of a plain matrix.
    pub fn score(&self, store: &ParamStore, f: &Array2<f64>, t: Option<usize>) -> Result<f64> {
        let tape = Tape::new();
        let b = store.bind(&tape);
        let v = tape.leaf2(f.clone());
        Ok(self.forward(&tape, &b, v, t)?.item())
    }
}
