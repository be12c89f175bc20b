//! Hierarchical hybrid transformer generator: denoises (F_t, X, t) into a
//! clean-series estimate and derives a directed connectivity matrix from it.
//!
//! Layout of one forward pass:
//!   F_t + time embedding ──┐
//!                          ├─ cross-channel fusion ─ encoder (downsample +
//!   conditioning X ────────┘    attention blocks) ─ decoder (upsample + skips)
//!   clean estimate = fused output + decoder output; connectivity = ridge
//!   regression of each ROI's next step on the others (zero diagonal).

use ndarray::{Array1, Array2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{EcdiffError, Result};
use crate::params::{xavier2, xavier_shaped, zeros, Binding, ParamId, ParamStore};
use crate::tape::{
    attention_axis, columns_to_offdiag, concat_channels, conv1d, conv1d_rows, conv1d_transpose,
    instance_norm, AttnAxis, Tape, Var,
};

/// Architecture variants from the ablation experiments, all off by default.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    /// Drop the down/up-sampling hierarchy and keep a single attention block.
    pub no_hierarchy: bool,
    /// Replace each attention block with a width-3 convolution.
    pub sete_as_conv: bool,
    /// Disable the spatial (cross-ROI) attention stage inside each block.
    pub no_sma: bool,
    /// Disable the temporal attention stage inside each block.
    pub no_tma: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.sete_as_conv && (self.no_sma || self.no_tma) {
            return Err(EcdiffError::Config(
                "sete_as_conv replaces the attention block entirely; combining it with \
                 no_sma/no_tma is contradictory"
                    .into(),
            ));
        }
        if self.no_sma && self.no_tma {
            return Err(EcdiffError::Config(
                "no_sma and no_tma together reduce every block to the identity".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n_rois: usize,
    pub length: usize,
    /// Channel count after the first temporal downsampling stage.
    pub base_channels: usize,
    pub heads: usize,
    pub levels: usize,
    /// Attention blocks per level; must have `levels` entries.
    pub blocks_per_level: Vec<usize>,
    pub timestep_embed_dim: usize,
    /// Ridge regularizer of the connectivity estimator.
    pub ridge_lambda: f64,
    #[serde(default)]
    pub ablation: AblationFlags,
}

impl GeneratorConfig {
    /// Small configuration for desk-scale runs.
    pub fn desk(n_rois: usize, length: usize) -> Self {
        Self {
            n_rois,
            length,
            base_channels: 2,
            heads: 2,
            levels: 2,
            blocks_per_level: vec![2, 2],
            timestep_embed_dim: 16,
            ridge_lambda: 1e-3,
            ablation: AblationFlags::default(),
        }
    }

    /// Full-scale preset: five levels of two blocks each over 90×187 input.
    pub fn paper_scale() -> Self {
        Self {
            n_rois: 90,
            length: 187,
            base_channels: 2,
            heads: 2,
            levels: 5,
            blocks_per_level: vec![2; 5],
            timestep_embed_dim: 32,
            ridge_lambda: 1e-3,
            ablation: AblationFlags::default(),
        }
    }

    /// Channel count entering encoder level `i` (0-based).
    fn channels_in(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.base_channels << (level - 1)
        }
    }

    /// Channel count leaving encoder level `i`.
    fn channels_out(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        if self.n_rois == 0 || self.length < 2 {
            return Err(EcdiffError::Config("n_rois and length must be positive (length >= 2)".into()));
        }
        if self.base_channels == 0 || self.heads == 0 || self.levels == 0 {
            return Err(EcdiffError::Config("channels, heads and levels must be positive".into()));
        }
        if self.timestep_embed_dim == 0 || self.timestep_embed_dim % 2 != 0 {
            return Err(EcdiffError::Config("timestep_embed_dim must be a positive even number".into()));
        }
        if self.ridge_lambda <= 0.0 {
            return Err(EcdiffError::Config("ridge_lambda must be > 0".into()));
        }
        if self.blocks_per_level.len() != self.levels {
            return Err(EcdiffError::Config(format!(
                "blocks_per_level has {} entries for {} levels",
                self.blocks_per_level.len(),
                self.levels
            )));
        }
        if self.ablation.no_hierarchy {
            if self.heads != 1 {
                return Err(EcdiffError::Config(
                    "no_hierarchy keeps a single-channel block; set heads = 1".into(),
                ));
            }
        } else {
            let mut len = self.length;
            for level in 0..self.levels {
                if len < 2 {
                    return Err(EcdiffError::Config(format!(
                        "length {} too short for {} levels (level {} sees {})",
                        self.length, self.levels, level, len
                    )));
                }
                len = len.div_ceil(2);
                let ch = self.channels_out(level);
                if ch % self.heads != 0 {
                    return Err(EcdiffError::Config(format!(
                        "heads {} must divide channel count {} at level {}",
                        self.heads, ch, level
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Sinusoidal position code for a diffusion step.
pub fn timestep_embedding(t: usize, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut out = Array1::<f64>::zeros(dim);
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        let arg = t as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
    out
}

// ---- building blocks ----

/// Two-layer row-wise feed-forward over N×dim values.
struct Ffn {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl Ffn {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), xavier2(rng, dim, dim)),
            b1: store.add(format!("{prefix}.b1"), zeros(&[dim])),
            w2: store.add(format!("{prefix}.w2"), xavier2(rng, dim, dim)),
            b2: store.add(format!("{prefix}.b2"), zeros(&[dim])),
        }
    }

    fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        let h = x.matmul(b.var(self.w1)).add_row_vector(b.var(self.b1)).gelu();
        h.matmul(b.var(self.w2)).add_row_vector(b.var(self.b2))
    }
}

/// Single-head self-attention across the rows of an N×dim value.
struct RowSelfAttention {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    scale: f64,
}

impl RowSelfAttention {
    fn new(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            wq: store.add(format!("{prefix}.wq"), xavier2(rng, dim, dim)),
            wk: store.add(format!("{prefix}.wk"), xavier2(rng, dim, dim)),
            wv: store.add(format!("{prefix}.wv"), xavier2(rng, dim, dim)),
            scale: (dim as f64).sqrt(),
        }
    }

    fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        let q = x.matmul(b.var(self.wq));
        let k = x.matmul(b.var(self.wk));
        let v = x.matmul(b.var(self.wv));
        let scores = q.matmul(k.transpose()).scale(1.0 / self.scale);
        scores.softmax_rows().matmul(v)
    }
}

/// Cross-channel fusion of the noisy sample with the conditioning sample.
struct CrossChannelFuser {
    ffn_in: Ffn,
    attn: RowSelfAttention,
    cross_bias: ParamId,
    conv_kernel: ParamId,
    conv_bias: ParamId,
    ffn_out: Ffn,
    length: usize,
}

impl CrossChannelFuser {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        n_rois: usize,
        length: usize,
        rng: &mut dyn RngCore,
    ) -> Self {
        Self {
            ffn_in: Ffn::new(store, &format!("{prefix}.ffn_in"), length, rng),
            attn: RowSelfAttention::new(store, &format!("{prefix}.attn"), length, rng),
            // learned ROI-to-ROI logit bias; gives the cross stage positional
            // identity so row correspondence survives even when the query side
            // is pure noise (chain start). Starts diagonal: each ROI attends
            // to its own conditioning row first.
            cross_bias: store.add(format!("{prefix}.cross_bias"), {
                let mut b = Array2::<f64>::zeros((n_rois, n_rois));
                for i in 0..n_rois {
                    b[[i, i]] = 4.0;
                }
                b.into_dyn()
            }),
            conv_kernel: store.add(format!("{prefix}.conv.k"), xavier_shaped(rng, &[3], 3, 3)),
            conv_bias: store.add(format!("{prefix}.conv.b"), zeros(&[])),
            ffn_out: Ffn::new(store, &format!("{prefix}.ffn_out"), length, rng),
            length,
        }
    }

    /// Feed-forward and self-attention stages (residual, so per-ROI identity
    /// survives initialization), then cross-channel attention against the
    /// conditioning sample (queries from the noisy features, keys and values
    /// from X, plus a learned pairwise logit bias), a shared width-3
    /// convolution per ROI, and a residual closing feed-forward.
    fn forward<'t>(&self, b: &Binding<'t>, f_t: Var<'t>, x: Var<'t>) -> Var<'t> {
        let h = f_t.add(self.ffn_in.forward(b, f_t));
        let e_t = h.add(self.attn.forward(b, h));
        let scores = e_t
            .matmul(x.transpose())
            .scale(1.0 / (self.length as f64).sqrt())
            .add(b.var(self.cross_bias));
        let fused = e_t.add(scores.softmax_rows().matmul(x));
        let local = conv1d_rows(fused, b.var(self.conv_kernel), b.var(self.conv_bias));
        local.add(self.ffn_out.forward(b, local))
    }
}

struct HeadProjection {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

impl HeadProjection {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize, head_dim: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            wq: store.add(format!("{prefix}.wq"), xavier2(rng, channels, head_dim)),
            wk: store.add(format!("{prefix}.wk"), xavier2(rng, channels, head_dim)),
            wv: store.add(format!("{prefix}.wv"), xavier2(rng, channels, head_dim)),
        }
    }
}

/// Project [C,N,L] onto a head subspace: y[k,n,l] = Σ_c w[c,k] x[c,n,l].
fn project_channels<'t>(x: Var<'t>, w: Var<'t>) -> Var<'t> {
    let shape = x.shape();
    let (c, n, l) = (shape[0], shape[1], shape[2]);
    let k = w.shape()[1];
    let flat = x.reshape(&[c, n * l]); // [C, N·L]
    let projected = w.transpose().matmul(flat); // [K, N·L]
    projected.reshape(&[k, n, l])
}

/// Residual block applying multi-head attention across ROIs, then across time.
struct SpaceTimeBlock {
    norm_s_gain: ParamId,
    norm_s_bias: ParamId,
    norm_t_gain: ParamId,
    norm_t_bias: ParamId,
    spatial_heads: Vec<HeadProjection>,
    temporal_heads: Vec<HeadProjection>,
    scale: f64,
    no_sma: bool,
    no_tma: bool,
}

impl SpaceTimeBlock {
    fn new(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        heads: usize,
        flags: AblationFlags,
        rng: &mut dyn RngCore,
    ) -> Self {
        let head_dim = channels / heads;
        let mk_heads = |store: &mut ParamStore, tag: &str, rng: &mut dyn RngCore| {
            (0..heads)
                .map(|h| HeadProjection::new(store, &format!("{prefix}.{tag}.h{h}"), channels, head_dim, rng))
                .collect::<Vec<_>>()
        };
        Self {
            norm_s_gain: store.add(format!("{prefix}.norm_s.gain"), crate::params::ones(&[channels])),
            norm_s_bias: store.add(format!("{prefix}.norm_s.bias"), zeros(&[channels])),
            norm_t_gain: store.add(format!("{prefix}.norm_t.gain"), crate::params::ones(&[channels])),
            norm_t_bias: store.add(format!("{prefix}.norm_t.bias"), zeros(&[channels])),
            spatial_heads: mk_heads(store, "sma", rng),
            temporal_heads: mk_heads(store, "tma", rng),
            scale: (head_dim as f64).sqrt(),
            no_sma: flags.no_sma,
            no_tma: flags.no_tma,
        }
    }

    fn attention<'t>(
        &self,
        b: &Binding<'t>,
        x: Var<'t>,
        heads: &[HeadProjection],
        axis: AttnAxis,
    ) -> Var<'t> {
        let tape = x.tape();
        let outs: Vec<Var> = heads
            .iter()
            .map(|h| {
                let q = project_channels(x, b.var(h.wq));
                let k = project_channels(x, b.var(h.wk));
                let v = project_channels(x, b.var(h.wv));
                attention_axis(q, k, v, axis, self.scale)
            })
            .collect();
        if outs.len() == 1 {
            outs[0]
        } else {
            concat_channels(tape, &outs)
        }
    }

    fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        let mut cur = x;
        if !self.no_sma {
            let normed = instance_norm(cur, b.var(self.norm_s_gain), b.var(self.norm_s_bias), 1e-5);
            cur = self.attention(b, normed, &self.spatial_heads, AttnAxis::Roi).add(cur);
        }
        if !self.no_tma {
            let normed = instance_norm(cur, b.var(self.norm_t_gain), b.var(self.norm_t_bias), 1e-5);
            cur = self.attention(b, normed, &self.temporal_heads, AttnAxis::Time).add(cur);
        }
        cur
    }
}

/// Ablation substitute: plain width-3 same-length convolution.
struct ConvBlock {
    w: ParamId,
    b: ParamId,
}

impl ConvBlock {
    fn new(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            w: store.add(
                format!("{prefix}.w"),
                xavier_shaped(rng, &[channels, channels, 3], channels * 3, channels * 3),
            ),
            b: store.add(format!("{prefix}.b"), zeros(&[channels])),
        }
    }

    fn forward<'t>(&self, bind: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        conv1d(x, bind.var(self.w), bind.var(self.b), 1)
    }
}

enum LevelBlock {
    Attention(SpaceTimeBlock),
    Conv(ConvBlock),
}

impl LevelBlock {
    fn forward<'t>(&self, b: &Binding<'t>, x: Var<'t>) -> Var<'t> {
        match self {
            LevelBlock::Attention(blk) => blk.forward(b, x),
            LevelBlock::Conv(blk) => blk.forward(b, x),
        }
    }
}

struct Downsample {
    w: ParamId,
    b: ParamId,
}

struct Upsample {
    w: ParamId,
    b: ParamId,
}

/// The full generator. Parameters live in an external [`ParamStore`]; the
/// forward pass is pure given a binding.
pub struct Generator {
    pub cfg: GeneratorConfig,
    time_proj_w: ParamId,
    time_proj_b: ParamId,
    fuser: CrossChannelFuser,
    down: Vec<Downsample>,
    level_blocks: Vec<Vec<LevelBlock>>,
    up: Vec<Upsample>,
    solo_block: Option<LevelBlock>,
    param_range: (usize, usize),
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, store: &mut ParamStore, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let start = store.len();
        let time_proj_w =
            store.add("g.time.w", xavier2(rng, cfg.timestep_embed_dim, cfg.length));
        let time_proj_b = store.add("g.time.b", zeros(&[cfg.length]));
        let fuser = CrossChannelFuser::new(store, "g.fuse", cfg.n_rois, cfg.length, rng);

        let mut down = Vec::new();
        let mut level_blocks = Vec::new();
        let mut up = Vec::new();
        let mut solo_block = None;

        let mk_block = |store: &mut ParamStore, prefix: &str, ch: usize, rng: &mut dyn RngCore| {
            if cfg.ablation.sete_as_conv {
                LevelBlock::Conv(ConvBlock::new(store, prefix, ch, rng))
            } else {
                LevelBlock::Attention(SpaceTimeBlock::new(
                    store,
                    prefix,
                    ch,
                    cfg.heads,
                    cfg.ablation,
                    rng,
                ))
            }
        };

        if cfg.ablation.no_hierarchy {
            solo_block = Some(mk_block(store, "g.solo", 1, rng));
        } else {
            for level in 0..cfg.levels {
                let cin = cfg.channels_in(level);
                let cout = cfg.channels_out(level);
                down.push(Downsample {
                    w: store.add(
                        format!("g.down{level}.w"),
                        xavier_shaped(rng, &[cout, cin, 3], cin * 3, cout * 3),
                    ),
                    b: store.add(format!("g.down{level}.b"), zeros(&[cout])),
                });
                let blocks = (0..cfg.blocks_per_level[level])
                    .map(|i| mk_block(store, &format!("g.l{level}.blk{i}"), cout, rng))
                    .collect();
                level_blocks.push(blocks);
            }
            for level in (0..cfg.levels).rev() {
                let cin = cfg.channels_out(level);
                let cout = cfg.channels_in(level);
                up.push(Upsample {
                    w: store.add(
                        format!("g.up{level}.w"),
                        xavier_shaped(rng, &[cin, cout, 3], cin * 3, cout * 3),
                    ),
                    b: store.add(format!("g.up{level}.b"), zeros(&[cout])),
                });
            }
        }
        let end = store.len();
        Ok(Self {
            cfg,
            time_proj_w,
            time_proj_b,
            fuser,
            down,
            level_blocks,
            up,
            solo_block,
            param_range: (start, end),
        })
    }

    /// Ids of every generator parameter.
    pub fn param_ids(&self) -> std::ops::Range<ParamId> {
        self.param_range.0..self.param_range.1
    }

    /// Denoise one sample. `f_t` is the noisy series at step `t`, `x` the
    /// conditioning rough series. Returns the clean estimate and the
    /// connectivity matrix derived from it.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        b: &Binding<'t>,
        f_t: &Array2<f64>,
        x: &Array2<f64>,
        t: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let (n, d) = (self.cfg.n_rois, self.cfg.length);
        if f_t.dim() != (n, d) || x.dim() != (n, d) {
            return Err(EcdiffError::Shape(format!(
                "generator expects {}x{}, got noisy {:?} and conditioning {:?}",
                n,
                d,
                f_t.dim(),
                x.dim()
            )));
        }
        let f_t = tape.leaf2(f_t.clone());
        let x = tape.leaf2(x.clone());

        // timestep code, projected to a length-d vector and broadcast to ROIs
        let emb = timestep_embedding(t, self.cfg.timestep_embed_dim);
        let emb = tape.leaf(
            emb.into_shape(ndarray::IxDyn(&[1, self.cfg.timestep_embed_dim])).unwrap(),
        );
        let time_vec = emb
            .matmul(b.var(self.time_proj_w))
            .add_row_vector(b.var(self.time_proj_b))
            .reshape(&[d]);
        let f_in = f_t.add_row_vector(time_vec);

        let f_mca = self.fuser.forward(b, f_in, x);

        let f_tus = if let Some(block) = &self.solo_block {
            let h = f_mca.reshape(&[1, n, d]);
            block.forward(b, h).reshape(&[n, d])
        } else {
            // encoder, remembering each level's input for skips and lengths
            let mut cur = f_mca.reshape(&[1, n, d]);
            let mut enc_inputs = Vec::with_capacity(self.cfg.levels);
            let mut lengths = Vec::with_capacity(self.cfg.levels);
            for (level, ds) in self.down.iter().enumerate() {
                enc_inputs.push(cur);
                lengths.push(cur.shape()[2]);
                cur = conv1d(cur, b.var(ds.w), b.var(ds.b), 2);
                for blk in &self.level_blocks[level] {
                    cur = blk.forward(b, cur);
                }
            }
            // decoder mirrors with upsampling; inner levels add their skips,
            // the top level is closed by the fused-plus-decoder addition below
            for (rev_idx, us) in self.up.iter().enumerate() {
                let level = self.cfg.levels - 1 - rev_idx;
                cur = conv1d_transpose(cur, b.var(us.w), b.var(us.b), lengths[level]);
                if level > 0 {
                    cur = cur.add(enc_inputs[level]);
                }
            }
            cur.reshape(&[n, d])
        };

        let f0_hat = f_mca.add(f_tus);
        let a = estimate_bec(f0_hat, self.cfg.ridge_lambda)?;
        Ok((f0_hat, a))
    }
}

/// Ridge regression of each ROI's next time step on all other ROIs' current
/// step. Entry (j, i) is the influence of source j on target i; the diagonal
/// is exactly zero. Differentiable end to end.
pub fn estimate_bec(f0: Var<'_>, ridge_lambda: f64) -> Result<Var<'_>> {
    let shape = f0.shape();
    let (n, d) = (shape[0], shape[1]);
    if d < 2 {
        return Err(EcdiffError::Shape("connectivity estimation needs at least 2 time points".into()));
    }
    let tape = f0.tape();
    let lag = f0.slice_cols(0, d - 1);
    let lead = f0.slice_cols(1, d);
    let mut cols = Vec::with_capacity(n);
    for i in 0..n {
        let sources: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let zi = lag.select_rows(&sources);
        let yi = lead.select_rows(&[i]);
        let gram = zi.matmul(zi.transpose()).add_diag(ridge_lambda);
        let rhs = zi.matmul(yi.transpose());
        let weights = gram.inverse().matmul(rhs);
        cols.push(weights);
    }
    Ok(columns_to_offdiag(tape, &cols))
}

/// Non-differentiable convenience wrapper around [`estimate_bec`].
pub fn estimate_bec_matrix(f0: &Array2<f64>, ridge_lambda: f64) -> Result<Array2<f64>> {
    let tape = Tape::new();
    let v = tape.leaf2(f0.clone());
    let a = estimate_bec(v, ridge_lambda)?;
    let val = a.value();
    Ok(val
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
        .to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            n_rois: 4,
            length: 8,
            base_channels: 2,
            heads: 1,
            levels: 1,
            blocks_per_level: vec![1],
            timestep_embed_dim: 8,
            ridge_lambda: 1e-3,
            ablation: AblationFlags::default(),
        }
    }

    #[test]
    fn config_validation_catches_bad_combos() {
        let mut cfg = tiny_cfg();
        cfg.ablation.sete_as_conv = true;
        cfg.ablation.no_sma = true;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_cfg();
        cfg.ablation.no_sma = true;
        cfg.ablation.no_tma = true;
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_cfg();
        cfg.heads = 3; // does not divide channel counts
        assert!(cfg.validate().is_err());

        let mut cfg = tiny_cfg();
        cfg.levels = 4; // length 8 -> 4 -> 2 -> 1: too short
        cfg.blocks_per_level = vec![1; 4];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn forward_preserves_shape_and_is_finite() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let gen = Generator::new(cfg, &mut store, &mut rng).unwrap();
        let f_t = Array2::from_shape_simple_fn((4, 8), || rng.gen_range(-1.0..1.0));
        let x = Array2::from_shape_simple_fn((4, 8), || rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let b = store.bind(&tape);
        let (f0_hat, a) = gen.forward(&tape, &b, &f_t, &x, 4).unwrap();
        assert_eq!(f0_hat.shape(), vec![4, 8]);
        assert_eq!(a.shape(), vec![4, 4]);
        assert!(f0_hat.value().iter().all(|v| v.is_finite()));
        assert!(a.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn zero_decoder_weights_make_output_equal_fused_branch() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let gen = Generator::new(cfg, &mut store, &mut rng).unwrap();
        // zero every decoder parameter
        for pid in gen.param_ids() {
            if store.name(pid).starts_with("g.up") {
                store.value_mut(pid).fill(0.0);
            }
        }
        let f_t = Array2::from_shape_simple_fn((4, 8), || rng.gen_range(-1.0..1.0));
        let x = Array2::from_shape_simple_fn((4, 8), || rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let b = store.bind(&tape);
        let (f0_hat, _) = gen.forward(&tape, &b, &f_t, &x, 4).unwrap();

        // recompute the fused branch alone
        let tape2 = Tape::new();
        let b2 = store.bind(&tape2);
        let f_t_leaf = tape2.leaf2(f_t.clone());
        let x_leaf = tape2.leaf2(x.clone());
        let emb = timestep_embedding(4, gen.cfg.timestep_embed_dim);
        let emb = tape2.leaf(emb.into_shape(ndarray::IxDyn(&[1, gen.cfg.timestep_embed_dim])).unwrap());
        let tv = emb
            .matmul(b2.var(gen.time_proj_w))
            .add_row_vector(b2.var(gen.time_proj_b))
            .reshape(&[8]);
        let f_in = f_t_leaf.add_row_vector(tv);
        let f_mca = gen.fuser.forward(&b2, f_in, x_leaf);
        for (got, want) in f0_hat.value().iter().zip(f_mca.value().iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mca_single_row_softmax_is_identity_weighting() {
        // With one ROI the cross-channel softmax collapses to 1, so the fused
        // stage passes the conditioning row through unchanged.
        let e = array![[0.5, -1.0, 2.0]];
        let x = array![[10.0, -3.0, 0.1]];
        let tape = Tape::new();
        let ev = tape.leaf2(e);
        let xv = tape.leaf2(x.clone());
        let scores = ev.matmul(xv.transpose()).scale(1.0 / (3f64).sqrt());
        let p = scores.softmax_rows();
        assert!((p.value()[[0, 0]] - 1.0).abs() < 1e-15);
        let fused = p.matmul(xv);
        for (a, b) in fused.value().iter().zip(x.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn mca_matches_scalar_recomputation_on_tiny_case() {
        // N=3, d=4 with seeded weights: recompute the cross-channel stage by
        // scalar arithmetic from the registered parameter values.
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let fuser = CrossChannelFuser::new(&mut store, "m", 3, 4, &mut rng);
        let f = array![[0.3, -0.2, 0.8, 0.0], [1.0, 0.5, -0.5, 0.2], [-0.7, 0.1, 0.4, -0.1]];
        let x = array![[0.2, 0.1, -0.3, 0.5], [-0.4, 0.9, 0.0, 0.3], [0.6, -0.2, 0.7, -0.8]];
        let tape = Tape::new();
        let b = store.bind(&tape);
        let out = fuser.forward(&b, tape.leaf2(f.clone()), tape.leaf2(x.clone()));

        // scalar recomputation
        let get2 = |pid: ParamId| -> Array2<f64> {
            store.value(pid).clone().into_dimensionality::<ndarray::Ix2>().unwrap()
        };
        let get1 = |pid: ParamId| -> Array1<f64> {
            store.value(pid).clone().into_dimensionality::<ndarray::Ix1>().unwrap()
        };
        let gelu = |v: f64| {
            let k = 0.7978845608028654;
            let u = k * (v + 0.044715 * v * v * v);
            0.5 * v * (1.0 + u.tanh())
        };
        let ffn = |inp: &Array2<f64>, w1: &Array2<f64>, b1: &Array1<f64>, w2: &Array2<f64>, b2: &Array1<f64>| {
            let mut h = inp.dot(w1);
            for mut row in h.rows_mut() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = gelu(*v + b1[c]);
                }
            }
            let mut o = h.dot(w2);
            for mut row in o.rows_mut() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v += b2[c];
                }
            }
            o
        };
        let softmax_rows = |m: &Array2<f64>| {
            let mut out = m.clone();
            for mut row in out.rows_mut() {
                let mx = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                let mut s = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    s += *v;
                }
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
            out
        };
        let h = &f
            + &ffn(
                &f,
                &get2(fuser.ffn_in.w1),
                &get1(fuser.ffn_in.b1),
                &get2(fuser.ffn_in.w2),
                &get1(fuser.ffn_in.b2),
            );
        let q = h.dot(&get2(fuser.attn.wq));
        let k = h.dot(&get2(fuser.attn.wk));
        let v = h.dot(&get2(fuser.attn.wv));
        let e_t = &h + &softmax_rows(&(q.dot(&k.t()) / 2.0)).dot(&v);
        let bias2 = get2(fuser.cross_bias);
        let fused = &e_t + &softmax_rows(&(&e_t.dot(&x.t()) / 2.0 + &bias2)).dot(&x);
        let kern = get1(fuser.conv_kernel);
        let bias = store.value(fuser.conv_bias).iter().next().copied().unwrap();
        let mut local = Array2::<f64>::zeros((3, 4));
        for r in 0..3 {
            for j in 0..4usize {
                let mut acc = bias;
                for t in 0..3usize {
                    let pos = j as isize + t as isize - 1;
                    if pos >= 0 && (pos as usize) < 4 {
                        acc += kern[t] * fused[[r, pos as usize]];
                    }
                }
                local[[r, j]] = acc;
            }
        }
        let want = &local
            + &ffn(
                &local,
                &get2(fuser.ffn_out.w1),
                &get1(fuser.ffn_out.b1),
                &get2(fuser.ffn_out.w2),
                &get1(fuser.ffn_out.b2),
            );
        for (a, bb) in out.value().iter().zip(want.iter()) {
            assert!((a - bb).abs() < 1e-12, "{} vs {}", a, bb);
        }
    }

    #[test]
    fn downsample_upsample_shape_round_trip() {
        // tds halves length with ceil and doubles channels; tus inverts both
        for len in [8usize, 9, 187] {
            let mut store = ParamStore::new();
            let mut rng = ChaCha20Rng::seed_from_u64(2);
            let w_down = store.add("d.w", xavier_shaped(&mut rng, &[4, 2, 3], 6, 12));
            let b_down = store.add("d.b", zeros(&[4]));
            let w_up = store.add("u.w", xavier_shaped(&mut rng, &[4, 2, 3], 12, 6));
            let b_up = store.add("u.b", zeros(&[2]));
            let tape = Tape::new();
            let b = store.bind(&tape);
            let x = tape.leaf(crate::tape::Arr::from_shape_simple_fn(
                ndarray::IxDyn(&[2, 3, len]),
                || rng.gen_range(-1.0..1.0),
            ));
            let down = conv1d(x, b.var(w_down), b.var(b_down), 2);
            assert_eq!(down.shape(), vec![4, 3, len.div_ceil(2)]);
            let up = conv1d_transpose(down, b.var(w_up), b.var(b_up), len);
            assert_eq!(up.shape(), vec![2, 3, len]);
        }
    }

    #[test]
    fn estimate_bec_zero_input_gives_zero_matrix() {
        let z = Array2::<f64>::zeros((4, 10));
        let a = estimate_bec_matrix(&z, 1e-3).unwrap();
        assert!(a.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn estimate_bec_recovers_noiseless_var() {
        // signed 5-cycle with all eigenvalue moduli equal, so a single
        // noiseless trajectory excites every direction persistently
        let n = 5;
        let mut a_true = Array2::<f64>::zeros((n, n));
        let weights = [0.97, -1.02, 0.99, 1.01, -0.98];
        for i in 0..n {
            a_true[[i, (i + 1) % n]] = weights[i];
        }
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let z0 = Array1::from_shape_simple_fn(n, || rng.gen_range(-1.0..1.0f64));
        let data = crate::ingest::simulate_var(&a_true, &z0, 500, 0.0, &mut rng);
        let a_hat = estimate_bec_matrix(&data, 1e-6).unwrap();
        let err = (&a_hat - &a_true).mapv(|v| v * v).sum().sqrt()
            / a_true.mapv(|v| v * v).sum().sqrt();
        assert!(err < 1e-3, "relative error {}", err);
    }

    #[test]
    fn estimate_bec_matches_independent_per_row_solve() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let f0 = Array2::from_shape_simple_fn((4, 12), || rng.gen_range(-1.0..1.0));
        let lambda = 0.05;
        let a = estimate_bec_matrix(&f0, lambda).unwrap();
        let n = 4;
        let d = 12;
        for i in 0..n {
            let sources: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let m = sources.len();
            // normal equations assembled scalar by scalar
            let e = m;
            let mut gram = Array2::<f64>::zeros((e, e));
            let mut rhs = Array1::<f64>::zeros(e);
            for (r, &jr) in sources.iter().enumerate() {
                for (c, &jc) in sources.iter().enumerate() {
                    for t in 0..d - 1 {
                        gram[[r, c]] += f0[[jr, t]] * f0[[jc, t]];
                    }
                }
                gram[[r, r]] += 0.0;
                for t in 0..d - 1 {
                    rhs[r] += f0[[jr, t]] * f0[[i, t + 1]];
                }
            }
            for r in 0..e {
                gram[[r, r]] += lambda;
            }
            let w = crate::linalg::invert(&gram).unwrap().dot(&rhs);
            for (r, &j) in sources.iter().enumerate() {
                assert!((a[[j, i]] - w[r]).abs() < 1e-8, "mismatch at ({}, {})", j, i);
            }
            assert_eq!(a[[i, i]], 0.0);
        }
    }

    #[test]
    fn estimate_bec_is_asymmetric_on_generic_data() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut a_true = Array2::<f64>::zeros((4, 4));
        a_true[[0, 1]] = 0.8;
        a_true[[2, 3]] = -0.6;
        a_true[[1, 2]] = 0.5;
        let z0 = Array1::from_shape_simple_fn(4, || rng.gen_range(-1.0..1.0f64));
        let data = crate::ingest::simulate_var(&a_true, &z0, 300, 0.3, &mut rng);
        let a = estimate_bec_matrix(&data, 1e-4).unwrap();
        let mut max_asym = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                max_asym = max_asym.max((a[[i, j]] - a[[j, i]]).abs());
            }
        }
        assert!(max_asym > 1e-3, "expected a clearly asymmetric estimate");
    }

    #[test]
    fn paper_scale_shapes_pass_through() {
        let cfg = GeneratorConfig::paper_scale();
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        let gen = Generator::new(cfg, &mut store, &mut rng).unwrap();
        let f_t = Array2::from_shape_simple_fn((90, 187), || rng.gen_range(-1.0..1.0));
        let x = Array2::from_shape_simple_fn((90, 187), || rng.gen_range(-1.0..1.0));
        let tape = Tape::new();
        let b = store.bind(&tape);
        let (f0_hat, a) = gen.forward(&tape, &b, &f_t, &x, 1000).unwrap();
        assert_eq!(f0_hat.shape(), vec![90, 187]);
        assert_eq!(a.shape(), vec![90, 90]);
    }
}
