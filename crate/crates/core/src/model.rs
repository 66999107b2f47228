//! Encoder/decoder transformer, text towers and the per-token diffusion head.
//!
//! All sequences of a batch are packed row-wise into one matrix; linear
//! layers run over the whole pack and attention runs per [`Segment`]. The
//! encoder never receives caption tokens: text reaches the image path only
//! through the decoder's cross-attention.

use dream_numerics::{Graph, ParamId, ParamSet, Scalar, Tensor, Var};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{DreamError, Result};
use crate::masking::MaskState;
use crate::rng::{self, tag, Rng};
use crate::synthdata::{vocab, CaptionTokens, CAPTION_LEN};
use crate::tokenizer::token_channels;

/// Which encoder rows are averaged into the contrastive image embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipTokens {
    All,
    Buffer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid_side: usize,
    pub token_channels: usize,
    pub width: usize,
    pub heads: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub text_blocks: usize,
    pub buffer_tokens: usize,
    pub head_layers: usize,
    pub embed_dim: usize,
    pub vocab_size: usize,
    pub caption_len: usize,
    pub mlp_ratio: usize,
    /// 1-based encoder block whose output feeds the contrastive loss.
    pub clip_loss_layer: usize,
    pub clip_tokens: ClipTokens,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Width 64, 2+2 blocks, 4 heads, 8 buffer tokens, 8x8 grid.
    pub fn toy() -> Self {
        Self {
            grid_side: 8,
            token_channels: token_channels(),
            width: 64,
            heads: 4,
            enc_blocks: 2,
            dec_blocks: 2,
            text_blocks: 2,
            buffer_tokens: 8,
            head_layers: 6,
            embed_dim: 64,
            vocab_size: 64,
            caption_len: CAPTION_LEN,
            mlp_ratio: 4,
            clip_loss_layer: 2,
            clip_tokens: ClipTokens::All,
            init_std: 0.02,
        }
    }

    /// Width 16 on a 4x4 grid; small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            grid_side: 4,
            width: 16,
            heads: 2,
            text_blocks: 1,
            buffer_tokens: 2,
            head_layers: 3,
            embed_dim: 16,
            vocab_size: vocab::SIZE,
            mlp_ratio: 2,
            ..Self::toy()
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_side * self.grid_side
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(DreamError::Config(m.to_string()));
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad("model.width must be a positive multiple of model.heads");
        }
        if !self.width.is_multiple_of(2) {
            return bad("model.width must be even");
        }
        if self.enc_blocks == 0 || self.dec_blocks == 0 {
            return bad("encoder and decoder need at least one block");
        }
        if self.clip_loss_layer == 0 || self.clip_loss_layer > self.enc_blocks {
            return bad("model.clip_loss_layer must be in 1..=enc_blocks");
        }
        if self.clip_tokens == ClipTokens::Buffer && self.buffer_tokens == 0 {
            return bad("buffer-token pooling needs model.buffer_tokens >= 1");
        }
        if self.vocab_size < vocab::SIZE {
            return bad("model.vocab_size smaller than the caption vocabulary");
        }
        if self.token_channels != token_channels() || self.caption_len != CAPTION_LEN {
            return bad("token channels / caption length are fixed by the data pipeline");
        }
        if self.head_layers == 0 || self.grid_side == 0 {
            return bad("model.head_layers and model.grid_side must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone)]
struct AttnIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    o: LinearIds,
}

#[derive(Debug, Clone)]
struct BlockIds {
    ln1: NormIds,
    attn: AttnIds,
    cross: Option<(NormIds, AttnIds)>,
    ln2: NormIds,
    fc1: LinearIds,
    fc2: LinearIds,
}

#[derive(Debug, Clone)]
struct TowerIds {
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    norm: NormIds,
}

#[derive(Debug, Clone)]
struct HeadIds {
    t1: LinearIds,
    t2: LinearIds,
    input: LinearIds,
    layers: Vec<(LinearIds, LinearIds)>,
    out_norm: NormIds,
    out: LinearIds,
}

/// Parameter layout of the full model. Parameters themselves live in a
/// [`ParamSet`], so live and EMA weights share one layout.
#[derive(Debug, Clone)]
pub struct DreamModel {
    pub config: ModelConfig,
    enc_in: LinearIds,
    enc_pos: ParamId,
    buffers: Option<ParamId>,
    enc_blocks: Vec<BlockIds>,
    enc_norm: NormIds,
    clip_img: LinearIds,
    dec_embed: LinearIds,
    dec_pos: ParamId,
    mask_token: ParamId,
    dec_blocks: Vec<BlockIds>,
    dec_norm: NormIds,
    text_clip: TowerIds,
    text_clip_proj: LinearIds,
    text_cond: TowerIds,
    text_cond_proj: LinearIds,
    null_cond: ParamId,
    head: HeadIds,
    logit_scale: ParamId,
}

/// Initial value of the log logit scale, `ln(1 / 0.07)`.
pub const INIT_LOG_LOGIT_SCALE: f64 = 2.659_260_036_932_778;
pub const MAX_LOGIT_SCALE: f64 = 100.0;

struct Builder<'a, T: Scalar> {
    ps: &'a mut ParamSet<T>,
    rng: Rng,
    normal: Normal<f64>,
}

impl<T: Scalar> Builder<'_, T> {
    fn randn(&mut self, name: String, shape: &[usize], decay: bool) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.normal.sample(&mut self.rng)))
            .collect();
        self.ps
            .add(name, Tensor::new(shape.to_vec(), data).unwrap(), decay)
    }

    fn fill(&mut self, name: String, shape: &[usize], v: f64) -> ParamId {
        self.ps
            .add(name, Tensor::full(shape.to_vec(), T::from_f64_lossy(v)), false)
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearIds {
        LinearIds {
            w: self.randn(format!("{name}.w"), &[din, dout], true),
            b: self.fill(format!("{name}.b"), &[dout], 0.0),
        }
    }

    fn zero_linear(&mut self, name: &str, din: usize, dout: usize) -> LinearIds {
        LinearIds {
            w: self
                .ps
                .add(format!("{name}.w"), Tensor::zeros(vec![din, dout]), true),
            b: self.fill(format!("{name}.b"), &[dout], 0.0),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            gain: self.fill(format!("{name}.gain"), &[d], 1.0),
            bias: self.fill(format!("{name}.bias"), &[d], 0.0),
        }
    }

    fn attn(&mut self, name: &str, d: usize) -> AttnIds {
        AttnIds {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn block(&mut self, name: &str, d: usize, ratio: usize, cross: bool) -> BlockIds {
        BlockIds {
            ln1: self.norm(&format!("{name}.ln1"), d),
            attn: self.attn(&format!("{name}.attn"), d),
            cross: cross.then(|| {
                (
                    self.norm(&format!("{name}.ln_cross"), d),
                    self.attn(&format!("{name}.cross"), d),
                )
            }),
            ln2: self.norm(&format!("{name}.ln2"), d),
            fc1: self.linear(&format!("{name}.fc1"), d, d * ratio),
            fc2: self.linear(&format!("{name}.fc2"), d * ratio, d),
        }
    }

    fn tower(&mut self, name: &str, cfg: &ModelConfig) -> TowerIds {
        let d = cfg.width;
        TowerIds {
            tok: self.randn(format!("{name}.tok"), &[cfg.vocab_size, d], false),
            pos: self.randn(format!("{name}.pos"), &[cfg.caption_len, d], false),
            blocks: (0..cfg.text_blocks)
                .map(|i| self.block(&format!("{name}.block{i}"), d, cfg.mlp_ratio, false))
                .collect(),
            norm: self.norm(&format!("{name}.norm"), d),
        }
    }
}

/// A contiguous run of rows belonging to one sequence in a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

fn uniform_segments(count: usize, len: usize) -> Vec<Segment> {
    (0..count)
        .map(|i| Segment {
            start: i * len,
            len,
        })
        .collect()
}

/// Visible tokens of one image as `(grid position, values)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub positions: Vec<usize>,
    /// `[positions.len(), channels]`, row-major.
    pub values: Vec<f64>,
}

impl EncoderInput {
    pub fn from_grid(grid_values: &[f64], channels: usize, mask: &MaskState) -> Result<Self> {
        if grid_values.len() != mask.n_tokens() * channels {
            return Err(DreamError::Input(format!(
                "grid has {} values, mask covers {} tokens of {channels} channels",
                grid_values.len(),
                mask.n_tokens()
            )));
        }
        let positions = mask.unmasked_positions();
        let mut values = Vec::with_capacity(positions.len() * channels);
        for &p in &positions {
            values.extend_from_slice(&grid_values[p * channels..(p + 1) * channels]);
        }
        Ok(Self { positions, values })
    }
}

/// Packed encoder result for a batch.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// Final-layer (normalized) features, `[rows, width]`.
    pub features: Var,
    /// Features at the contrastive tap layer.
    pub tap: Var,
    pub segments: Vec<Segment>,
    /// Grid position of each non-buffer row, per sample.
    pub positions: Vec<Vec<usize>>,
    /// Unit-norm contrastive image embeddings, `[batch, embed_dim]`.
    pub pooled: Var,
    pub buffer_tokens: usize,
}

impl EncoderOutput {
    pub fn feature_rows(&self, sample: usize) -> usize {
        self.segments[sample].len
    }
}

/// Row-averaging matrix `[segments, total_rows]`.
fn averaging_matrix<T: Scalar>(segs: &[(usize, usize)], total_rows: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); segs.len() * total_rows];
    for (i, &(start, len)) in segs.iter().enumerate() {
        if len == 0 {
            return Err(DreamError::Input("pooling over zero rows".into()));
        }
        let w = T::from_f64_lossy(1.0 / len as f64);
        for r in start..start + len {
            data[i * total_rows + r] = w;
        }
    }
    Ok(Tensor::new(vec![segs.len(), total_rows], data)?)
}

/// Sinusoidal timestep features `[cos(t f_i), sin(t f_i)]`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    out.extend(freqs.iter().map(|f| (t * f).sin()));
    out
}

impl DreamModel {
    /// Builds the layout and initial parameters. Weights are drawn from
    /// `N(0, init_std^2)`, biases and the final head layer start at zero.
    pub fn new<T: Scalar>(config: ModelConfig, seed: u64) -> Result<(Self, ParamSet<T>)> {
        config.validate()?;
        let mut ps = ParamSet::new();
        let cfg = &config;
        let d = cfg.width;
        let mut b = Builder {
            ps: &mut ps,
            rng: rng::substream(seed, &[tag::INIT]),
            normal: Normal::new(0.0, cfg.init_std)
                .map_err(|e| DreamError::Config(format!("model.init_std: {e}")))?,
        };
        let n = cfg.n_tokens();
        let enc_in = b.linear("enc.in", cfg.token_channels, d);
        let enc_pos = b.randn("enc.pos".into(), &[n, d], false);
        let buffers =
            (cfg.buffer_tokens > 0).then(|| b.randn("enc.buffers".into(), &[cfg.buffer_tokens, d], false));
        let enc_blocks = (0..cfg.enc_blocks)
            .map(|i| b.block(&format!("enc.block{i}"), d, cfg.mlp_ratio, false))
            .collect();
        let enc_norm = b.norm("enc.norm", d);
        let clip_img = b.linear("clip.img_proj", d, cfg.embed_dim);
        let dec_embed = b.linear("dec.embed", d, d);
        let dec_pos = b.randn("dec.pos".into(), &[cfg.buffer_tokens + n, d], false);
        let mask_token = b.randn("dec.mask_token".into(), &[1, d], false);
        let dec_blocks = (0..cfg.dec_blocks)
            .map(|i| b.block(&format!("dec.block{i}"), d, cfg.mlp_ratio, true))
            .collect();
        let dec_norm = b.norm("dec.norm", d);
        let text_clip = b.tower("text_clip", cfg);
        let text_clip_proj = b.linear("text_clip.proj", d, cfg.embed_dim);
        let text_cond = b.tower("text_cond", cfg);
        let text_cond_proj = b.linear("text_cond.proj", d, d);
        let null_cond = b.randn("text_cond.null".into(), &[cfg.caption_len, d], false);
        let head = HeadIds {
            t1: b.linear("head.t1", d, d),
            t2: b.linear("head.t2", d, d),
            input: b.linear("head.in", cfg.token_channels, d),
            layers: (0..cfg.head_layers)
                .map(|i| {
                    (
                        b.linear(&format!("head.layer{i}.a"), d, d),
                        b.linear(&format!("head.layer{i}.b"), d, d),
                    )
                })
                .collect(),
            out_norm: b.norm("head.out_norm", d),
            out: b.zero_linear("head.out", d, cfg.token_channels),
        };
        let logit_scale = b.fill("clip.log_logit_scale".into(), &[1], INIT_LOG_LOGIT_SCALE);
        let model = Self {
            config,
            enc_in,
            enc_pos,
            buffers,
            enc_blocks,
            enc_norm,
            clip_img,
            dec_embed,
            dec_pos,
            mask_token,
            dec_blocks,
            dec_norm,
            text_clip,
            text_clip_proj,
            text_cond,
            text_cond_proj,
            null_cond,
            head,
            logit_scale,
        };
        Ok((model, ps))
    }

    /// Parameter ids of the cross-attention output projections.
    pub fn cross_attention_output_params(&self) -> Vec<ParamId> {
        self.dec_blocks
            .iter()
            .filter_map(|b| b.cross.as_ref())
            .flat_map(|(_, a)| [a.o.w, a.o.b])
            .collect()
    }

    /// Parameter ids belonging to the diffusion head.
    pub fn head_params(&self) -> Vec<ParamId> {
        let h = &self.head;
        let mut ids = vec![h.t1.w, h.t1.b, h.t2.w, h.t2.b, h.input.w, h.input.b];
        for (a, b) in &h.layers {
            ids.extend([a.w, a.b, b.w, b.b]);
        }
        ids.extend([h.out_norm.gain, h.out_norm.bias, h.out.w, h.out.b]);
        ids
    }

    fn lin<T: Scalar>(g: &mut Graph<T>, ps: &ParamSet<T>, ids: &LinearIds, x: Var) -> Result<Var> {
        let w = g.param(ps, ids.w);
        let b = g.param(ps, ids.b);
        Ok(g.linear(x, w, Some(b))?)
    }

    fn norm<T: Scalar>(g: &mut Graph<T>, ps: &ParamSet<T>, ids: &NormIds, x: Var) -> Result<Var> {
        let y = g.layer_norm(x);
        let gain = g.param(ps, ids.gain);
        let bias = g.param(ps, ids.bias);
        let y = g.mul(y, gain)?;
        Ok(g.add(y, bias)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        ids: &AttnIds,
        xq: Var,
        q_segs: &[Segment],
        xkv: Var,
        kv_segs: &[Segment],
    ) -> Result<Var> {
        let q = Self::lin(g, ps, &ids.q, xq)?;
        let k = Self::lin(g, ps, &ids.k, xkv)?;
        let v = Self::lin(g, ps, &ids.v, xkv)?;
        let qs: Vec<_> = q_segs.iter().map(|s| (s.start, s.len)).collect();
        let ks: Vec<_> = kv_segs.iter().map(|s| (s.start, s.len)).collect();
        let o = g.attention(q, k, v, &qs, &ks, self.config.heads)?;
        Self::lin(g, ps, &ids.o, o)
    }

    fn block<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        ids: &BlockIds,
        x: Var,
        segs: &[Segment],
        ctx: Option<(Var, &[Segment])>,
    ) -> Result<Var> {
        let h = Self::norm(g, ps, &ids.ln1, x)?;
        let a = self.attention(g, ps, &ids.attn, h, segs, h, segs)?;
        let mut x = g.add(x, a)?;
        if let (Some((ln, cross)), Some((c, csegs))) = (&ids.cross, ctx) {
            let h = Self::norm(g, ps, ln, x)?;
            let a = self.attention(g, ps, cross, h, segs, c, csegs)?;
            x = g.add(x, a)?;
        }
        let h = Self::norm(g, ps, &ids.ln2, x)?;
        let f = Self::lin(g, ps, &ids.fc1, h)?;
        let f = g.gelu(f);
        let f = Self::lin(g, ps, &ids.fc2, f)?;
        Ok(g.add(x, f)?)
    }

    /// Runs the vision encoder over buffer tokens plus each sample's visible
    /// tokens.
    pub fn encoder_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        inputs: &[EncoderInput],
    ) -> Result<EncoderOutput> {
        let cfg = &self.config;
        let c = cfg.token_channels;
        let nb = cfg.buffer_tokens;
        if inputs.is_empty() {
            return Err(DreamError::Input("encoder batch is empty".into()));
        }
        let mut all_pos = Vec::new();
        let mut flat = Vec::new();
        for inp in inputs {
            if inp.values.len() != inp.positions.len() * c {
                return Err(DreamError::Input("encoder input value count mismatch".into()));
            }
            if nb + inp.positions.len() == 0 {
                return Err(DreamError::Input(
                    "encoder input has no tokens and no buffer tokens".into(),
                ));
            }
            if let Some(&p) = inp.positions.iter().find(|&&p| p >= cfg.n_tokens()) {
                return Err(DreamError::Input(format!("token position {p} out of range")));
            }
            all_pos.extend_from_slice(&inp.positions);
            flat.extend(inp.values.iter().map(|&v| T::from_f64_lossy(v)));
        }
        let visible = all_pos.len();
        let mut sources = Vec::new();
        if let Some(bid) = self.buffers {
            sources.push(g.param(ps, bid));
        }
        if visible > 0 {
            let x = g.constant_from([visible, c], flat)?;
            let proj = Self::lin(g, ps, &self.enc_in, x)?;
            let pos_table = g.param(ps, self.enc_pos);
            let pos = g.gather_rows(pos_table, &all_pos)?;
            sources.push(g.add(proj, pos)?);
        }
        let source = if sources.len() == 1 {
            sources[0]
        } else {
            g.concat(&sources, 0)?
        };
        let mut idx = Vec::with_capacity(inputs.len() * nb + visible);
        let mut segments = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for inp in inputs {
            let start = idx.len();
            idx.extend(0..nb);
            idx.extend(nb + offset..nb + offset + inp.positions.len());
            offset += inp.positions.len();
            segments.push(Segment {
                start,
                len: idx.len() - start,
            });
        }
        let mut x = g.gather_rows(source, &idx)?;
        let mut tap = None;
        for (i, blk) in self.enc_blocks.iter().enumerate() {
            x = self.block(g, ps, blk, x, &segments, None)?;
            if i + 1 == cfg.clip_loss_layer && i + 1 != cfg.enc_blocks {
                tap = Some(x);
            }
        }
        let features = Self::norm(g, ps, &self.enc_norm, x)?;
        let tap = tap.unwrap_or(features);

        let pool_segs: Vec<(usize, usize)> = segments
            .iter()
            .map(|s| match cfg.clip_tokens {
                ClipTokens::All => (s.start, s.len),
                ClipTokens::Buffer => (s.start, nb),
            })
            .collect();
        let avg = averaging_matrix::<T>(&pool_segs, idx.len())?;
        let avg = g.constant(avg);
        let pooled = g.matmul(avg, tap)?;
        let pooled = Self::lin(g, ps, &self.clip_img, pooled)?;
        let pooled = g.l2_normalize(pooled);
        Ok(EncoderOutput {
            features,
            tap,
            segments,
            positions: inputs.iter().map(|i| i.positions.clone()).collect(),
            pooled,
            buffer_tokens: nb,
        })
    }

    /// Global average of final encoder features per sample, `[batch, width]`.
    pub fn global_pool<T: Scalar>(&self, g: &mut Graph<T>, enc: &EncoderOutput) -> Result<Var> {
        let segs: Vec<_> = enc.segments.iter().map(|s| (s.start, s.len)).collect();
        let rows = enc.segments.last().map_or(0, |s| s.start + s.len);
        let avg = g.constant(averaging_matrix::<T>(&segs, rows)?);
        Ok(g.matmul(avg, enc.features)?)
    }

    /// Rebuilds full-length sequences for the selected encoder samples and
    /// returns conditioning vectors `z`, `[samples.len() * n_tokens, width]`,
    /// ordered by sample then grid position.
    pub fn decoder_forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        enc: &EncoderOutput,
        samples: &[usize],
        masks: &[&MaskState],
        cond: Var,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n = cfg.n_tokens();
        let nb = cfg.buffer_tokens;
        let l = cfg.caption_len;
        if samples.len() != masks.len() || samples.is_empty() {
            return Err(DreamError::Input("decoder samples/masks mismatch".into()));
        }
        if g.dims(cond) != (samples.len() * l, cfg.width) {
            return Err(DreamError::Input(format!(
                "conditioning has shape {:?}, expected [{}, {}]",
                g.shape(cond),
                samples.len() * l,
                cfg.width
            )));
        }
        let e = Self::lin(g, ps, &self.dec_embed, enc.features)?;
        let total = enc.segments.last().map_or(0, |s| s.start + s.len);
        let mask_row = total;
        let mut idx = Vec::with_capacity(samples.len() * (nb + n));
        for (&s, mask) in samples.iter().zip(masks) {
            let seg = enc.segments.get(s).ok_or_else(|| {
                DreamError::Input(format!("decoder sample {s} not in encoder batch"))
            })?;
            let positions = &enc.positions[s];
            if mask.n_tokens() != n || mask.unmasked_positions().len() != positions.len() {
                return Err(DreamError::Input(format!(
                    "mask with {} visible tokens does not match {} encoder rows",
                    mask.n_tokens() - mask.masked_count,
                    positions.len()
                )));
            }
            let mut row_of = vec![None; n];
            for (j, &p) in positions.iter().enumerate() {
                if mask.masked[p] {
                    return Err(DreamError::Input(format!(
                        "encoder saw position {p}, which the mask hides"
                    )));
                }
                row_of[p] = Some(seg.start + nb + j);
            }
            idx.extend(seg.start..seg.start + nb);
            idx.extend(row_of.iter().map(|r| r.unwrap_or(mask_row)));
        }
        let mask_tok = g.param(ps, self.mask_token);
        let src = g.concat(&[e, mask_tok], 0)?;
        let x = g.gather_rows(src, &idx)?;
        let pos_table = g.param(ps, self.dec_pos);
        let pos_idx: Vec<usize> = (0..samples.len()).flat_map(|_| 0..nb + n).collect();
        let pos = g.gather_rows(pos_table, &pos_idx)?;
        let mut x = g.add(x, pos)?;
        let segs = uniform_segments(samples.len(), nb + n);
        let csegs = uniform_segments(samples.len(), l);
        for blk in &self.dec_blocks {
            x = self.block(g, ps, blk, x, &segs, Some((cond, &csegs)))?;
        }
        let x = Self::norm(g, ps, &self.dec_norm, x)?;
        if nb == 0 {
            return Ok(x);
        }
        let keep: Vec<usize> = (0..samples.len())
            .flat_map(|b| (b * (nb + n) + nb)..((b + 1) * (nb + n)))
            .collect();
        Ok(g.gather_rows(x, &keep)?)
    }

    fn tower<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        ids: &TowerIds,
        captions: &[CaptionTokens],
    ) -> Result<Var> {
        let l = self.config.caption_len;
        let mut tok_idx = Vec::with_capacity(captions.len() * l);
        for c in captions {
            for &t in c.tokens() {
                if t as usize >= self.config.vocab_size {
                    return Err(DreamError::UnknownToken(t));
                }
                tok_idx.push(t as usize);
            }
        }
        let table = g.param(ps, ids.tok);
        let x = g.gather_rows(table, &tok_idx)?;
        let pos_table = g.param(ps, ids.pos);
        let pos_idx: Vec<usize> = (0..captions.len()).flat_map(|_| 0..l).collect();
        let pos = g.gather_rows(pos_table, &pos_idx)?;
        let mut x = g.add(x, pos)?;
        let segs = uniform_segments(captions.len(), l);
        for blk in &ids.blocks {
            x = self.block(g, ps, blk, x, &segs, None)?;
        }
        Self::norm(g, ps, &ids.norm, x)
    }

    /// Unit-norm caption embeddings for the contrastive loss, `[batch, embed_dim]`.
    pub fn text_encode_contrastive<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        captions: &[CaptionTokens],
    ) -> Result<Var> {
        if captions.is_empty() {
            return Err(DreamError::Input("empty caption batch".into()));
        }
        let h = self.tower(g, ps, &self.text_clip, captions)?;
        let l = self.config.caption_len;
        let segs: Vec<_> = (0..captions.len()).map(|i| (i * l, l)).collect();
        let avg = g.constant(averaging_matrix::<T>(&segs, captions.len() * l)?);
        let pooled = g.matmul(avg, h)?;
        let pooled = Self::lin(g, ps, &self.text_clip_proj, pooled)?;
        Ok(g.l2_normalize(pooled))
    }

    /// Decoder conditioning tokens, `[batch * caption_len, width]`. Null
    /// prompts map to a dedicated learned sequence.
    pub fn text_encode_cond<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        captions: &[CaptionTokens],
    ) -> Result<Var> {
        if captions.is_empty() {
            return Err(DreamError::Input("empty caption batch".into()));
        }
        let l = self.config.caption_len;
        let real: Vec<CaptionTokens> = captions.iter().filter(|c| !c.is_null()).copied().collect();
        let null = g.param(ps, self.null_cond);
        if real.is_empty() {
            let idx: Vec<usize> = (0..captions.len()).flat_map(|_| 0..l).collect();
            return Ok(g.gather_rows(null, &idx)?);
        }
        let h = self.tower(g, ps, &self.text_cond, &real)?;
        let proj = Self::lin(g, ps, &self.text_cond_proj, h)?;
        if real.len() == captions.len() {
            return Ok(proj);
        }
        let null_base = real.len() * l;
        let src = g.concat(&[proj, null], 0)?;
        let mut idx = Vec::with_capacity(captions.len() * l);
        let mut k = 0;
        for c in captions {
            if c.is_null() {
                idx.extend(null_base..null_base + l);
            } else {
                idx.extend(k * l..(k + 1) * l);
                k += 1;
            }
        }
        Ok(g.gather_rows(src, &idx)?)
    }

    /// Predicts the noise in `x_t` (`[rows, channels]`) given per-row
    /// timesteps and conditioning rows `z` (`[rows, width]`).
    pub fn diffusion_head<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &ParamSet<T>,
        x_t: Var,
        timesteps: &[usize],
        z: Var,
    ) -> Result<Var> {
        let d = self.config.width;
        let (rows, ch) = g.dims(x_t);
        if ch != self.config.token_channels || timesteps.len() != rows || g.dims(z) != (rows, d) {
            return Err(DreamError::Input(format!(
                "head inputs disagree: x_t {:?}, z {:?}, {} timesteps",
                g.shape(x_t),
                g.shape(z),
                timesteps.len()
            )));
        }
        let mut unique: Vec<usize> = timesteps.to_vec();
        unique.sort_unstable();
        unique.dedup();
        let table: Vec<T> = unique
            .iter()
            .flat_map(|&t| timestep_embedding(t as f64, d))
            .map(T::from_f64_lossy)
            .collect();
        let temb = g.constant_from([unique.len(), d], table)?;
        let te = Self::lin(g, ps, &self.head.t1, temb)?;
        let te = g.silu(te);
        let te = Self::lin(g, ps, &self.head.t2, te)?;
        let row_idx: Vec<usize> = timesteps
            .iter()
            .map(|t| unique.binary_search(t).unwrap())
            .collect();
        let te = g.gather_rows(te, &row_idx)?;
        let c = g.add(z, te)?;
        let mut h = Self::lin(g, ps, &self.head.input, x_t)?;
        for (a, b) in &self.head.layers {
            let u = g.layer_norm(h);
            let u = g.add(u, c)?;
            let u = Self::lin(g, ps, a, u)?;
            let u = g.silu(u);
            let u = Self::lin(g, ps, b, u)?;
            h = g.add(h, u)?;
        }
        let h = Self::norm(g, ps, &self.head.out_norm, h)?;
        Self::lin(g, ps, &self.head.out, h)
    }

    /// Effective contrastive logit scale `min(exp(s), 100)`.
    pub fn logit_scale<T: Scalar>(&self, g: &mut Graph<T>, ps: &ParamSet<T>) -> Var {
        let s = g.param(ps, self.logit_scale);
        let e = g.exp(s);
        g.clamp_max(e, MAX_LOGIT_SCALE)
    }

    pub fn logit_scale_param(&self) -> ParamId {
        self.logit_scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::make_mask;
    use crate::synthdata::{caption_of, SceneSpec};

    fn grid(n: usize, c: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::substream(seed, &[]);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n * c).map(|_| normal.sample(&mut r)).collect()
    }

    #[test]
    fn encoder_row_count_includes_buffers() {
        let (m, ps) = DreamModel::new::<f64>(ModelConfig::toy(), 1).unwrap();
        let vals = grid(64, 48, 2);
        let mask = MaskState::visible(64);
        let inp = EncoderInput::from_grid(&vals, 48, &mask).unwrap();
        let mut g = Graph::inference();
        let out = m.encoder_forward(&mut g, &ps, &[inp]).unwrap();
        assert_eq!(out.feature_rows(0), 72);
        assert_eq!(g.dims(out.features), (72, 64));
        let norm: f64 = g.value(out.pooled).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn encoder_handles_single_visible_token() {
        let (m, ps) = DreamModel::new::<f64>(ModelConfig::toy(), 1).unwrap();
        let vals = grid(64, 48, 3);
        let mut masked = vec![true; 64];
        masked[17] = false;
        let mask = MaskState::from_bitmap(masked);
        let inp = EncoderInput::from_grid(&vals, 48, &mask).unwrap();
        let mut g = Graph::inference();
        let out = m.encoder_forward(&mut g, &ps, &[inp]).unwrap();
        assert_eq!(out.feature_rows(0), 9);
        assert!(g.value(out.features).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_rejects_empty_input_without_buffers() {
        let cfg = ModelConfig {
            buffer_tokens: 0,
            ..ModelConfig::tiny()
        };
        let (m, ps) = DreamModel::new::<f64>(cfg, 1).unwrap();
        let inp = EncoderInput {
            positions: vec![],
            values: vec![],
        };
        let mut g = Graph::inference();
        assert!(m.encoder_forward(&mut g, &ps, &[inp]).is_err());
    }

    #[test]
    fn decoder_emits_one_row_per_grid_position() {
        let (m, ps) = DreamModel::new::<f64>(ModelConfig::toy(), 4).unwrap();
        let vals = grid(64, 48, 5);
        let mut r = rng::substream(6, &[]);
        for ratio in [0.0, 0.3, 1.0] {
            let mask = make_mask(ratio, 64, &mut r).unwrap();
            let inp = EncoderInput::from_grid(&vals, 48, &mask).unwrap();
            let mut g = Graph::inference();
            let enc = m.encoder_forward(&mut g, &ps, &[inp]).unwrap();
            let cap = caption_of(&SceneSpec::from_scene_index(3, 0));
            let cond = m.text_encode_cond(&mut g, &ps, &[cap]).unwrap();
            let z = m.decoder_forward(&mut g, &ps, &enc, &[0], &[&mask], cond).unwrap();
            assert_eq!(g.dims(z), (64, 64));
        }
    }

    #[test]
    fn decoder_rejects_mismatched_mask() {
        let (m, ps) = DreamModel::new::<f64>(ModelConfig::tiny(), 4).unwrap();
        let vals = grid(16, 48, 5);
        let mut r = rng::substream(6, &[]);
        let mask = make_mask(0.5, 16, &mut r).unwrap();
        let other = make_mask(0.25, 16, &mut r).unwrap();
        let inp = EncoderInput::from_grid(&vals, 48, &mask).unwrap();
        let mut g = Graph::inference();
        let enc = m.encoder_forward(&mut g, &ps, &[inp]).unwrap();
        let cond = m.text_encode_cond(&mut g, &ps, &[CaptionTokens::null()]).unwrap();
        assert!(m
            .decoder_forward(&mut g, &ps, &enc, &[0], &[&other], cond)
            .is_err());
    }

    #[test]
    fn null_prompt_uses_learned_sequence() {
        let (m, ps) = DreamModel::new::<f64>(ModelConfig::tiny(), 4).unwrap();
        let mut g = Graph::inference();
        let cap = caption_of(&SceneSpec::from_scene_index(9, 0));
        let mixed = m
            .text_encode_cond(&mut g, &ps, &[cap, CaptionTokens::null()])
            .unwrap();
        let l = CAPTION_LEN;
        let d = 16;
        let null = ps.tensor(m.null_cond).data();
        assert_eq!(&g.value(mixed)[l * d..], null);
    }

    #[test]
    fn head_starts_at_zero_and_matches_input_shape() {
        let (m, ps) = DreamModel::new::<f64>(ModelConfig::tiny(), 4).unwrap();
        let mut g = Graph::inference();
        let x = g.constant_from([5, 48], grid(5, 48, 1)).unwrap();
        let z = g.constant_from([5, 16], grid(5, 16, 2)).unwrap();
        let eps = m.diffusion_head(&mut g, &ps, x, &[1, 5, 5, 999, 1000], z).unwrap();
        assert_eq!(g.shape(eps), g.shape(x));
        assert!(g.value(eps).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::toy().validate().is_ok());
        let bad = ModelConfig {
            width: 30,
            heads: 4,
            ..ModelConfig::toy()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            clip_loss_layer: 3,
            ..ModelConfig::toy()
        };
        assert!(bad.validate().is_err());
    }
}
