//! Toy video diffusion transformer.
//!
//! Tokens are latent cells. The concatenated condition channels go through
//! a per-cell input projection whose heatmap and point-map rows start at
//! zero, so an untrained model ignores trajectories. Each block runs
//! timestep-modulated self-attention, spatially weighted cross-attention to
//! the caption tokens and a modulated MLP.

mod checkpoint;
mod flow;
mod sampler;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use flow::{fm_interpolate, fm_loss, fm_loss_grad, FlowSample, LossMode};
pub use sampler::{sample, SampleOutput};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attention::{build_bias, AttentionBias, AttentionMode, DEFAULT_W};
use crate::condition::{assemble, AssetSource, ConditionBundle, Latent, LatentGrid, DEFAULT_HEATMAP_SIGMA, LATENT_CHANNELS};
use crate::error::{ensure_arg, Error, Result};
use crate::nn::{attention, attention_backward, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, silu, silu_grad, AttentionCache, Mat};
use crate::text::{caption_spans, Vocabulary};
use crate::triplet::MultimodalTriplet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: LatentGrid,
    pub latent_channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_dim: usize,
    pub vocab: Vocabulary,
    pub attention_mode: AttentionMode,
    pub attention_w: f64,
    pub heatmap_sigma: f64,
}

impl ModelConfig {
    /// 16-frame 64x64 clips, D = 128, six blocks of four heads.
    pub fn desk_default() -> Self {
        Self {
            grid: LatentGrid::desk_default(),
            latent_channels: LATENT_CHANNELS,
            dim: 128,
            depth: 6,
            heads: 4,
            mlp_ratio: 4,
            text_dim: 64,
            vocab: crate::synthgen::caption_vocabulary(),
            attention_mode: AttentionMode::Weighted,
            attention_w: DEFAULT_W,
            heatmap_sigma: DEFAULT_HEATMAP_SIGMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_arg!(self.dim > 0 && self.depth > 0 && self.heads > 0, "dim, depth and heads must be positive");
        ensure_arg!(self.dim.is_multiple_of(self.heads), "dim {} not divisible by {} heads", self.dim, self.heads);
        ensure_arg!(self.dim.is_multiple_of(2), "dim must be even");
        ensure_arg!(self.latent_channels > 0 && self.text_dim > 0 && self.mlp_ratio > 0, "sizes must be positive");
        ensure_arg!(self.attention_w > 0.0, "attention w must be positive");
        ensure_arg!(self.heatmap_sigma > 0.0, "heatmap sigma must be positive");
        ensure_arg!(self.vocab.len() >= 3, "vocabulary is missing special tokens");
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        3 * self.latent_channels + 2
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.num_tokens()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ada_w: Mat,
    pub ada_b: Mat,
    pub qkv_w: Mat,
    pub qkv_b: Mat,
    pub attn_out_w: Mat,
    pub attn_out_b: Mat,
    pub cross_q_w: Mat,
    pub cross_q_b: Mat,
    pub cross_kv_w: Mat,
    pub cross_kv_b: Mat,
    pub cross_out_w: Mat,
    pub cross_out_b: Mat,
    pub mlp_w1: Mat,
    pub mlp_b1: Mat,
    pub mlp_w2: Mat,
    pub mlp_b2: Mat,
}

/// All learnable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub in_w: Mat,
    pub in_b: Mat,
    pub time_w1: Mat,
    pub time_b1: Mat,
    pub time_w2: Mat,
    pub time_b2: Mat,
    pub token_embed: Mat,
    pub blocks: Vec<BlockParams>,
    pub final_ada_w: Mat,
    pub final_ada_b: Mat,
    pub out_w: Mat,
    pub out_b: Mat,
}

fn normal(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| std * rng.sample::<f64, _>(StandardNormal))
}

fn xavier(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_fn(rows, cols, |_, _| rng.random_range(-limit..limit))
}

impl ModelParams {
    /// Seeded initialization. Modulation layers start at zero so every
    /// block's gated branches are initially closed.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c, e) = (config.dim, config.latent_channels, config.text_dim);
        let hidden = d * config.mlp_ratio;
        let cin = config.input_channels();
        let mut in_w = xavier(cin, d, &mut rng);
        for ch in Self::trajectory_input_rows(config) {
            in_w.row_mut(ch).iter_mut().for_each(|v| *v = 0.0);
        }
        let blocks = (0..config.depth)
            .map(|_| BlockParams {
                ada_w: Mat::zeros(d, 6 * d),
                ada_b: Mat::zeros(1, 6 * d),
                qkv_w: xavier(d, 3 * d, &mut rng),
                qkv_b: Mat::zeros(1, 3 * d),
                attn_out_w: xavier(d, d, &mut rng),
                attn_out_b: Mat::zeros(1, d),
                cross_q_w: xavier(d, d, &mut rng),
                cross_q_b: Mat::zeros(1, d),
                cross_kv_w: xavier(e, 2 * d, &mut rng),
                cross_kv_b: Mat::zeros(1, 2 * d),
                cross_out_w: xavier(d, d, &mut rng),
                cross_out_b: Mat::zeros(1, d),
                mlp_w1: xavier(d, hidden, &mut rng),
                mlp_b1: Mat::zeros(1, hidden),
                mlp_w2: xavier(hidden, d, &mut rng),
                mlp_b2: Mat::zeros(1, d),
            })
            .collect();
        Self {
            in_w,
            in_b: Mat::zeros(1, d),
            time_w1: normal(d, d, 0.02, &mut rng),
            time_b1: Mat::zeros(1, d),
            time_w2: normal(d, d, 0.02, &mut rng),
            time_b2: Mat::zeros(1, d),
            token_embed: normal(config.vocab.len(), e, 1.0, &mut rng),
            blocks,
            final_ada_w: Mat::zeros(d, 2 * d),
            final_ada_b: Mat::zeros(1, 2 * d),
            out_w: normal(d, c, 0.02, &mut rng),
            out_b: Mat::zeros(1, c),
        }
    }

    /// Input-projection rows fed by the heatmap and point-map channels.
    pub fn trajectory_input_rows(config: &ModelConfig) -> std::ops::Range<usize> {
        let c = config.latent_channels;
        (2 * c + 1)..(3 * c + 2)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|(_, m)| m.data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Every tensor with a stable name, in checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = vec![
            ("in_w".into(), &self.in_w),
            ("in_b".into(), &self.in_b),
            ("time_w1".into(), &self.time_w1),
            ("time_b1".into(), &self.time_b1),
            ("time_w2".into(), &self.time_w2),
            ("time_b2".into(), &self.time_b2),
            ("token_embed".into(), &self.token_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, m) in [
                ("ada_w", &b.ada_w),
                ("ada_b", &b.ada_b),
                ("qkv_w", &b.qkv_w),
                ("qkv_b", &b.qkv_b),
                ("attn_out_w", &b.attn_out_w),
                ("attn_out_b", &b.attn_out_b),
                ("cross_q_w", &b.cross_q_w),
                ("cross_q_b", &b.cross_q_b),
                ("cross_kv_w", &b.cross_kv_w),
                ("cross_kv_b", &b.cross_kv_b),
                ("cross_out_w", &b.cross_out_w),
                ("cross_out_b", &b.cross_out_b),
                ("mlp_w1", &b.mlp_w1),
                ("mlp_b1", &b.mlp_b1),
                ("mlp_w2", &b.mlp_w2),
                ("mlp_b2", &b.mlp_b2),
            ] {
                out.push((format!("blocks.{i}.{name}"), m));
            }
        }
        out.push(("final_ada_w".into(), &self.final_ada_w));
        out.push(("final_ada_b".into(), &self.final_ada_b));
        out.push(("out_w".into(), &self.out_w));
        out.push(("out_b".into(), &self.out_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out: Vec<(String, &mut Mat)> = vec![
            ("in_w".into(), &mut self.in_w),
            ("in_b".into(), &mut self.in_b),
            ("time_w1".into(), &mut self.time_w1),
            ("time_b1".into(), &mut self.time_b1),
            ("time_w2".into(), &mut self.time_w2),
            ("time_b2".into(), &mut self.time_b2),
            ("token_embed".into(), &mut self.token_embed),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (name, m) in [
                ("ada_w", &mut b.ada_w),
                ("ada_b", &mut b.ada_b),
                ("qkv_w", &mut b.qkv_w),
                ("qkv_b", &mut b.qkv_b),
                ("attn_out_w", &mut b.attn_out_w),
                ("attn_out_b", &mut b.attn_out_b),
                ("cross_q_w", &mut b.cross_q_w),
                ("cross_q_b", &mut b.cross_q_b),
                ("cross_kv_w", &mut b.cross_kv_w),
                ("cross_kv_b", &mut b.cross_kv_b),
                ("cross_out_w", &mut b.cross_out_w),
                ("cross_out_b", &mut b.cross_out_b),
                ("mlp_w1", &mut b.mlp_w1),
                ("mlp_b1", &mut b.mlp_b1),
                ("mlp_w2", &mut b.mlp_w2),
                ("mlp_b2", &mut b.mlp_b2),
            ] {
                out.push((format!("blocks.{i}.{name}"), m));
            }
        }
        out.push(("final_ada_w".into(), &mut self.final_ada_w));
        out.push(("final_ada_b".into(), &mut self.final_ada_b));
        out.push(("out_w".into(), &mut self.out_w));
        out.push(("out_b".into(), &mut self.out_b));
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.data.len()).sum()
    }

    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors().iter().map(|(_, m)| m.sq_norm()).sum()
    }
}

/// Caption tokens and attention bias for one triplet.
#[derive(Debug, Clone, PartialEq)]
pub struct TextConditioning {
    pub tokens: Vec<u32>,
    pub bias: AttentionBias,
}

/// Everything the network consumes besides `x_t` and `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub bundle: ConditionBundle,
    pub text: TextConditioning,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

struct BlockCache {
    ln1: Mat,
    ln1_is: Vec<f64>,
    h1: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    self_attn: AttentionCache,
    attn_heads: Mat,
    attn: Mat,
    ln2: Mat,
    ln2_is: Vec<f64>,
    cq: Mat,
    ck: Mat,
    cv: Mat,
    kv: Mat,
    cross_attn: AttentionCache,
    cross_heads: Mat,
    ln3: Mat,
    ln3_is: Vec<f64>,
    h3: Mat,
    m1: Mat,
    m1a: Mat,
    m2: Mat,
    mods: Vec<f64>,
}

/// Intermediate state saved by [`Model::forward_cached`].
pub struct ForwardCache {
    inp: Mat,
    temb: Vec<f64>,
    t_pre: Vec<f64>,
    t_act: Vec<f64>,
    cvec: Vec<f64>,
    text_emb: Mat,
    blocks: Vec<BlockCache>,
    lnf: Mat,
    lnf_is: Vec<f64>,
    hf: Mat,
    fmods: Vec<f64>,
}

/// Gradients of the network inputs, in concatenated-channel layout.
pub struct InputGrads {
    pub channels: Mat,
}

impl InputGrads {
    /// Gradient slice for one channel across all cells.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        (0..self.channels.rows).map(|r| self.channels.at(r, ch)).collect()
    }
}

fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[i] = arg.cos();
        out[half + i] = arg.sin();
    }
    out
}

/// Fixed sinusoidal embedding of (latent frame, row, column), one third of
/// the channels per axis; leftover channels are zero.
fn position_embedding(grid: &LatentGrid, dim: usize) -> Mat {
    let per_axis = (dim / 3) & !1;
    let mut m = Mat::zeros(grid.num_tokens(), dim);
    for k in 0..grid.latent_frames() {
        for r in 0..grid.height() {
            for c in 0..grid.width() {
                let row = m.row_mut(grid.token_index(k, r, c));
                for (axis, pos) in [k, r, c].into_iter().enumerate() {
                    for j in 0..per_axis / 2 {
                        let w = 0.5f64.powi(j as i32);
                        row[axis * per_axis + 2 * j] = (pos as f64 * w).sin();
                        row[axis * per_axis + 2 * j + 1] = (pos as f64 * w).cos();
                    }
                }
            }
        }
    }
    m
}

/// `ln * (1 + scale) + shift` with per-channel scale and shift.
fn modulate(ln: &Mat, shift: &[f64], scale: &[f64]) -> Mat {
    let mut out = ln.clone();
    for r in 0..out.rows {
        for ((v, sh), sc) in out.row_mut(r).iter_mut().zip(shift).zip(scale) {
            *v = *v * (1.0 + sc) + sh;
        }
    }
    out
}

/// Backward of [`modulate`]; writes shift and scale grads and returns the
/// gradient w.r.t. `ln`.
fn modulate_backward(ln: &Mat, scale: &[f64], dh: &Mat, dshift: &mut [f64], dscale: &mut [f64]) -> Mat {
    let mut dln = dh.clone();
    for r in 0..dh.rows {
        let (g, l) = (dh.row(r), ln.row(r));
        for j in 0..dh.cols {
            dshift[j] += g[j];
            dscale[j] += g[j] * l[j];
        }
        for (v, sc) in dln.row_mut(r).iter_mut().zip(scale) {
            *v *= 1.0 + sc;
        }
    }
    dln
}

fn split_cols(m: &Mat, parts: usize) -> Vec<Mat> {
    let w = m.cols / parts;
    (0..parts)
        .map(|p| Mat::from_fn(m.rows, w, |r, c| m.at(r, p * w + c)))
        .collect()
}

fn join_cols(parts: &[&Mat]) -> Mat {
    let w: usize = parts.iter().map(|m| m.cols).sum();
    let mut out = Mat::zeros(parts[0].rows, w);
    for r in 0..out.rows {
        let mut off = 0;
        for p in parts {
            out.row_mut(r)[off..off + p.cols].copy_from_slice(p.row(r));
            off += p.cols;
        }
    }
    out
}

fn vec_linear(x: &[f64], w: &Mat, b: &Mat) -> Vec<f64> {
    let xm = Mat::from_vec(1, x.len(), x.to_vec());
    linear(&xm, w, b).data
}

/// Backward of a single-row linear map; returns the input gradient.
fn vec_linear_backward(x: &[f64], w: &Mat, dy: &[f64], dw: &mut Mat, db: &mut Mat) -> Vec<f64> {
    let xm = Mat::from_vec(1, x.len(), x.to_vec());
    let dym = Mat::from_vec(1, dy.len(), dy.to_vec());
    linear_backward(&xm, w, &dym, dw, db).data
}

fn gate_rows(m: &Mat, gate: &[f64]) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows {
        for (v, g) in out.row_mut(r).iter_mut().zip(gate) {
            *v *= g;
        }
    }
    out
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn grid(&self) -> &LatentGrid {
        &self.config.grid
    }

    /// Prompt tokens in canonical track-id order and the matching bias.
    /// A triplet without captions gets a single `<null>` token.
    pub fn text_conditioning(&self, triplet: &MultimodalTriplet) -> Result<TextConditioning> {
        let fg = triplet.foreground_sorted();
        let captions: Vec<(&str, &str)> = fg
            .iter()
            .filter_map(|t| triplet.captions.get(&t.track_id).map(|c| (t.track_id.as_str(), c.text.as_str())))
            .collect();
        let (mut tokens, spans) = caption_spans(&captions, &self.config.vocab)?;
        let nq = self.config.num_tokens();
        if tokens.is_empty() {
            tokens.push(self.config.vocab.null());
            return Ok(TextConditioning {
                tokens,
                bias: AttentionBias::none(nq, 1),
            });
        }
        let bias = build_bias(triplet, &self.config.grid, &spans, tokens.len(), self.config.attention_w)?;
        Ok(TextConditioning { tokens, bias })
    }

    pub fn condition(&self, triplet: &MultimodalTriplet, first_frame: &image::RgbImage, noise: Latent, assets: &dyn AssetSource) -> Result<Conditioning> {
        let bundle = assemble(triplet, first_frame, noise, &self.config.grid, self.config.heatmap_sigma, assets)?;
        let text = self.text_conditioning(triplet)?;
        Ok(Conditioning { bundle, text })
    }

    fn check_inputs(&self, x_t: &Latent, cond: &Conditioning) -> Result<()> {
        let g = &self.config.grid;
        let expect = (g.latent_frames(), g.height(), g.width(), self.config.latent_channels);
        if x_t.shape() != expect || cond.bundle.image_latent.shape() != expect || cond.bundle.point_map.shape() != expect {
            return Err(Error::Shape(format!("latent shape {:?}, model expects {expect:?}", x_t.shape())));
        }
        let cells = expect.0 * expect.1 * expect.2;
        if cond.bundle.heatmap.data.len() != cells || cond.bundle.mask.data.len() != cells {
            return Err(Error::Shape("heatmap or mask does not match the grid".into()));
        }
        let text = &cond.text;
        if text.tokens.is_empty() || text.bias.num_keys != text.tokens.len() || text.bias.num_queries != cells {
            return Err(Error::Shape("text tokens and bias disagree".into()));
        }
        if let Some(&bad) = text.tokens.iter().find(|&&t| t as usize >= self.config.vocab.len()) {
            return Err(Error::Shape(format!("token id {bad} outside the vocabulary")));
        }
        Ok(())
    }

    /// Predicted velocity at `(x_t, t)`.
    pub fn forward(&self, x_t: &Latent, t: f64, cond: &Conditioning) -> Result<Latent> {
        Ok(self.forward_cached(x_t, t, cond)?.0)
    }

    pub fn forward_cached(&self, x_t: &Latent, t: f64, cond: &Conditioning) -> Result<(Latent, ForwardCache)> {
        self.check_inputs(x_t, cond)?;
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.dim;
        let n = cfg.num_tokens();

        let inp = Mat::from_vec(n, cfg.input_channels(), cond.bundle.concat_with(x_t));
        let mut x = linear(&inp, &p.in_w, &p.in_b);
        x.add_assign(&position_embedding(&cfg.grid, d));

        let temb = timestep_embedding(t, d);
        let t_pre = vec_linear(&temb, &p.time_w1, &p.time_b1);
        let t_act: Vec<f64> = t_pre.iter().map(|&v| silu(v)).collect();
        let cvec = vec_linear(&t_act, &p.time_w2, &p.time_b2);
        let sc: Vec<f64> = cvec.iter().map(|&v| silu(v)).collect();

        let text_emb = Mat::from_fn(cond.text.tokens.len(), cfg.text_dim, |r, c| p.token_embed.at(cond.text.tokens[r] as usize, c));
        let logit_bias = cond.text.bias.logit_bias(cfg.attention_mode);

        let mut blocks = Vec::with_capacity(cfg.depth);
        for bp in &p.blocks {
            let mods = vec_linear(&sc, &bp.ada_w, &bp.ada_b);
            let (shift1, scale1, gate1) = (&mods[0..d], &mods[d..2 * d], &mods[2 * d..3 * d]);
            let (shift2, scale2, gate2) = (&mods[3 * d..4 * d], &mods[4 * d..5 * d], &mods[5 * d..6 * d]);

            let (ln1, ln1_is) = layer_norm(&x);
            let h1 = modulate(&ln1, shift1, scale1);
            let qkv = linear(&h1, &bp.qkv_w, &bp.qkv_b);
            let mut parts = split_cols(&qkv, 3).into_iter();
            let (q, k, v) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
            let (attn_heads, self_attn) = attention(&q, &k, &v, cfg.heads, None);
            let attn = linear(&attn_heads, &bp.attn_out_w, &bp.attn_out_b);
            x.add_assign(&gate_rows(&attn, gate1));

            let (ln2, ln2_is) = layer_norm(&x);
            let cq = linear(&ln2, &bp.cross_q_w, &bp.cross_q_b);
            let kv = linear(&text_emb, &bp.cross_kv_w, &bp.cross_kv_b);
            let mut parts = split_cols(&kv, 2).into_iter();
            let (ck, cv) = (parts.next().unwrap(), parts.next().unwrap());
            let (cross_heads, cross_attn) = attention(&cq, &ck, &cv, cfg.heads, logit_bias.as_deref());
            x.add_assign(&linear(&cross_heads, &bp.cross_out_w, &bp.cross_out_b));

            let (ln3, ln3_is) = layer_norm(&x);
            let h3 = modulate(&ln3, shift2, scale2);
            let m1 = linear(&h3, &bp.mlp_w1, &bp.mlp_b1);
            let m1a = Mat::from_vec(m1.rows, m1.cols, m1.data.iter().map(|&v| gelu(v)).collect());
            let m2 = linear(&m1a, &bp.mlp_w2, &bp.mlp_b2);
            x.add_assign(&gate_rows(&m2, gate2));

            blocks.push(BlockCache {
                ln1,
                ln1_is,
                h1,
                q,
                k,
                v,
                self_attn,
                attn_heads,
                attn,
                ln2,
                ln2_is,
                cq,
                ck,
                cv,
                kv,
                cross_attn,
                cross_heads,
                ln3,
                ln3_is,
                h3,
                m1,
                m1a,
                m2,
                mods,
            });
        }

        let fmods = vec_linear(&sc, &p.final_ada_w, &p.final_ada_b);
        let (lnf, lnf_is) = layer_norm(&x);
        let hf = modulate(&lnf, &fmods[0..d], &fmods[d..2 * d]);
        let out = linear(&hf, &p.out_w, &p.out_b);

        let g = &cfg.grid;
        let latent = Latent {
            frames: g.latent_frames(),
            height: g.height(),
            width: g.width(),
            channels: cfg.latent_channels,
            data: out.data,
        };
        let cache = ForwardCache {
            inp,
            temb,
            t_pre,
            t_act,
            cvec,
            text_emb,
            blocks,
            lnf,
            lnf_is,
            hf,
            fmods,
        };
        Ok((latent, cache))
    }

    /// Accumulates parameter gradients of `<d_out, forward(...)>` into
    /// `grads` and returns the gradients of the concatenated inputs.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Latent, cond: &Conditioning, grads: &mut ModelParams) -> InputGrads {
        let cfg = &self.config;
        let p = &self.params;
        let d = cfg.dim;
        let n = cfg.num_tokens();
        let dout = Mat::from_vec(n, cfg.latent_channels, d_out.data.clone());

        let mut d_sc = vec![0.0; d];

        // Final layer.
        let dhf = linear_backward(&cache.hf, &p.out_w, &dout, &mut grads.out_w, &mut grads.out_b);
        let mut d_fmods = vec![0.0; 2 * d];
        let (dsh, dsc) = d_fmods.split_at_mut(d);
        let dlnf = modulate_backward(&cache.lnf, &cache.fmods[d..2 * d], &dhf, dsh, dsc);
        let mut dx = layer_norm_backward(&cache.lnf, &cache.lnf_is, &dlnf);
        let sc: Vec<f64> = cache.cvec.iter().map(|&v| silu(v)).collect();
        let g = vec_linear_backward(&sc, &p.final_ada_w, &d_fmods, &mut grads.final_ada_w, &mut grads.final_ada_b);
        d_sc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);

        let mut d_text = Mat::zeros(cache.text_emb.rows, cache.text_emb.cols);

        for (bi, (bp, bc)) in p.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            let gb = &mut grads.blocks[bi];
            let mods = &bc.mods;
            let (scale1, gate1) = (&mods[d..2 * d], &mods[2 * d..3 * d]);
            let (scale2, gate2) = (&mods[4 * d..5 * d], &mods[5 * d..6 * d]);
            let mut d_mods = vec![0.0; 6 * d];

            // MLP branch: x += gate2 * m2.
            for r in 0..n {
                let (gx, m2) = (dx.row(r), bc.m2.row(r));
                for j in 0..d {
                    d_mods[5 * d + j] += gx[j] * m2[j];
                }
            }
            let dm2 = gate_rows(&dx, gate2);
            let mut dm1 = linear_backward(&bc.m1a, &bp.mlp_w2, &dm2, &mut gb.mlp_w2, &mut gb.mlp_b2);
            for (g, &pre) in dm1.data.iter_mut().zip(&bc.m1.data) {
                *g *= gelu_grad(pre);
            }
            let dh3 = linear_backward(&bc.h3, &bp.mlp_w1, &dm1, &mut gb.mlp_w1, &mut gb.mlp_b1);
            let (dshift2, rest) = d_mods[3 * d..].split_at_mut(d);
            let dln3 = modulate_backward(&bc.ln3, scale2, &dh3, dshift2, &mut rest[..d]);
            dx.add_assign(&layer_norm_backward(&bc.ln3, &bc.ln3_is, &dln3));

            // Cross-attention branch: x += out_proj(attn(q(ln2), kv(text))).
            let dch = linear_backward(&bc.cross_heads, &bp.cross_out_w, &dx, &mut gb.cross_out_w, &mut gb.cross_out_b);
            let (dcq, dck, dcv) = attention_backward(&bc.cq, &bc.ck, &bc.cv, &bc.cross_attn, &dch);
            let dkv = join_cols(&[&dck, &dcv]);
            let _ = &bc.kv;
            let dte = linear_backward(&cache.text_emb, &bp.cross_kv_w, &dkv, &mut gb.cross_kv_w, &mut gb.cross_kv_b);
            d_text.add_assign(&dte);
            let dln2 = linear_backward(&bc.ln2, &bp.cross_q_w, &dcq, &mut gb.cross_q_w, &mut gb.cross_q_b);
            dx.add_assign(&layer_norm_backward(&bc.ln2, &bc.ln2_is, &dln2));

            // Self-attention branch: x += gate1 * out_proj(attn(qkv(h1))).
            for r in 0..n {
                let (gx, a) = (dx.row(r), bc.attn.row(r));
                for j in 0..d {
                    d_mods[2 * d + j] += gx[j] * a[j];
                }
            }
            let da = gate_rows(&dx, gate1);
            let dah = linear_backward(&bc.attn_heads, &bp.attn_out_w, &da, &mut gb.attn_out_w, &mut gb.attn_out_b);
            let (dq, dk, dv) = attention_backward(&bc.q, &bc.k, &bc.v, &bc.self_attn, &dah);
            let dqkv = join_cols(&[&dq, &dk, &dv]);
            let dh1 = linear_backward(&bc.h1, &bp.qkv_w, &dqkv, &mut gb.qkv_w, &mut gb.qkv_b);
            let (dshift1, rest) = d_mods.split_at_mut(d);
            let dln1 = modulate_backward(&bc.ln1, scale1, &dh1, dshift1, &mut rest[..d]);
            dx.add_assign(&layer_norm_backward(&bc.ln1, &bc.ln1_is, &dln1));

            let g = vec_linear_backward(&sc, &bp.ada_w, &d_mods, &mut gb.ada_w, &mut gb.ada_b);
            d_sc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }

        // Token embeddings.
        for (r, &tok) in cond.text.tokens.iter().enumerate() {
            for (g, v) in grads.token_embed.row_mut(tok as usize).iter_mut().zip(d_text.row(r)) {
                *g += v;
            }
        }

        // Timestep MLP.
        let d_c: Vec<f64> = d_sc.iter().zip(&cache.cvec).map(|(g, &c)| g * silu_grad(c)).collect();
        let d_tact = vec_linear_backward(&cache.t_act, &p.time_w2, &d_c, &mut grads.time_w2, &mut grads.time_b2);
        let d_tpre: Vec<f64> = d_tact.iter().zip(&cache.t_pre).map(|(g, &v)| g * silu_grad(v)).collect();
        let _ = vec_linear_backward(&cache.temb, &p.time_w1, &d_tpre, &mut grads.time_w1, &mut grads.time_b1);

        // Input projection (position embedding is fixed).
        let d_inp = linear_backward(&cache.inp, &p.in_w, &dx, &mut grads.in_w, &mut grads.in_b);
        InputGrads { channels: d_inp }
    }

    /// Flow-matching loss of one sample and its parameter gradients.
    pub fn loss_and_grad(&self, sample: &FlowSample, cond: &Conditioning, mode: LossMode, grads: &mut ModelParams) -> Result<f64> {
        let (pred, cache) = self.forward_cached(&sample.x_t, sample.t, cond)?;
        let loss = fm_loss(&pred, &sample.v_t, mode)?;
        let d_pred = fm_loss_grad(&pred, &sample.v_t, mode);
        self.backward(&cache, &d_pred, cond, grads);
        Ok(loss)
    }
}

/// Unit-variance Gaussian latent from a seed.
pub fn gaussian_latent(grid: &LatentGrid, channels: usize, seed: u64) -> Latent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_latent_from(grid, channels, &mut rng)
}

pub fn gaussian_latent_from(grid: &LatentGrid, channels: usize, rng: &mut impl Rng) -> Latent {
    let mut l = Latent::for_grid(grid, channels);
    l.data.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
    l
}
