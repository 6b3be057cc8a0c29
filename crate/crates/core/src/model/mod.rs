//! Extractors, fusion, the shared pre-LN encoder-decoder, CTC head and
//! pre-training predictor.
//!
//! A [`Model`] only holds parameter ids; values live in a
//! [`ParamStore`], so the EMA teacher is simply a second store with the same
//! layout.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
pub use layers::{positions, Block, FeedForward, LayerNorm, Linear, Mha};

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Ctx, ParamId, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::data::{Views, Vocab};
use layers::normal_init;

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    V,
    A,
    Av,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::V, Modality::A, Modality::Av];

    pub fn name(self) -> &'static str {
        match self {
            Modality::V => "v",
            Modality::A => "a",
            Modality::Av => "av",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: String,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub attn_dim: usize,
    pub attn_heads: usize,
    pub mlp_dim: usize,
    pub predictor_blocks: usize,
    pub predictor_dim: usize,
    /// Hidden width of the video and audio extractors.
    pub extractor_dim: usize,
    pub vocab_total: usize,
    pub video_dim: usize,
    pub audio_dim: usize,
    pub audio_rate_ratio: usize,
}

impl ModelConfig {
    /// Named size presets: `base` (paper shapes), `desk` (default desk
    /// scale) and `tiny` (fast experiments and tests).
    pub fn preset(
        name: &str,
        vocab: Vocab,
        video_dim: usize,
        audio_dim: usize,
        r: usize,
    ) -> std::result::Result<Self, ModelError> {
        let (enc, dec, dim, heads, mlp) = match name {
            "base" => (12, 6, 512, 8, 2048),
            "desk" => (4, 2, 64, 4, 128),
            "tiny" => (2, 1, 32, 2, 64),
            other => return Err(ModelError::Config(format!("unknown preset {other:?}"))),
        };
        let cfg = Self {
            preset: name.to_string(),
            encoder_blocks: enc,
            decoder_blocks: dec,
            attn_dim: dim,
            attn_heads: heads,
            mlp_dim: mlp,
            predictor_blocks: 2,
            predictor_dim: dim,
            extractor_dim: dim,
            vocab_total: vocab.total(),
            video_dim,
            audio_dim,
            audio_rate_ratio: r,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> std::result::Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.attn_heads == 0 || !self.attn_dim.is_multiple_of(self.attn_heads) {
            return bad(format!(
                "attn_dim {} not divisible by attn_heads {}",
                self.attn_dim, self.attn_heads
            ));
        }
        if !self.predictor_dim.is_multiple_of(self.attn_heads) {
            return bad("predictor_dim must be divisible by attn_heads".into());
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return bad("need at least one encoder and one decoder block".into());
        }
        if self.vocab_total <= Vocab::RESERVED {
            return bad("vocab_total must exceed the reserved ids".into());
        }
        if self.audio_rate_ratio == 0 || self.video_dim == 0 || self.audio_dim == 0 {
            return bad("input dims and rate ratio must be positive".into());
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_total - Vocab::RESERVED)
    }

    /// Audio strides `(s1, s2)` with `s1·s2 = r` and `s1 ≤ s2`.
    pub fn audio_strides(&self) -> (usize, usize) {
        let r = self.audio_rate_ratio;
        let s1 = (1..=r).filter(|d| r.is_multiple_of(*d) && d * d <= r).max().unwrap_or(1);
        (s1, r / s1)
    }
}

/// Zero-padded batch of raw views. Video is `[N, T, video_dim]`, audio
/// `[N, r·T, audio_dim]`, with per-sample video lengths `lens`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputBatch<T> {
    pub video: Tensor<T>,
    pub audio: Tensor<T>,
    pub lens: Vec<usize>,
    pub r: usize,
}

impl<T: Scalar> InputBatch<T> {
    pub fn from_views(views: &[&Views]) -> std::result::Result<Self, ModelError> {
        let first = views
            .first()
            .ok_or_else(|| ModelError::Config("empty batch".into()))?;
        let vd = first.video.shape()[1];
        let ad = first.audio.shape()[1];
        let tv0 = first.video_frames().max(1);
        let r = first.audio_frames() / tv0;
        let t = views.iter().map(|v| v.video_frames()).max().unwrap_or(0);
        let n = views.len();
        let mut video = vec![T::ZERO; n * t * vd];
        let mut audio = vec![T::ZERO; n * r * t * ad];
        let mut lens = Vec::with_capacity(n);
        for (i, v) in views.iter().enumerate() {
            let tv = v.video_frames();
            if v.audio_frames() != r * tv || v.video.shape()[1] != vd || v.audio.shape()[1] != ad {
                return Err(ModelError::Tensor(TensorError::Shape {
                    op: "batch",
                    lhs: v.video.shape().to_vec(),
                    rhs: v.audio.shape().to_vec(),
                }));
            }
            for (dst, &x) in video[i * t * vd..].iter_mut().zip(v.video.data()) {
                *dst = T::of(x as f64);
            }
            for (dst, &x) in audio[i * r * t * ad..].iter_mut().zip(v.audio.data()) {
                *dst = T::of(x as f64);
            }
            lens.push(tv);
        }
        Ok(Self {
            video: Tensor::new(&[n, t, vd], video)?,
            audio: Tensor::new(&[n, r * t, ad], audio)?,
            lens,
            r,
        })
    }

    pub fn n(&self) -> usize {
        self.lens.len()
    }

    pub fn t(&self) -> usize {
        self.video.shape()[1]
    }

    pub fn cast<U: Scalar>(&self) -> InputBatch<U> {
        InputBatch {
            video: self.video.cast(),
            audio: self.audio.cast(),
            lens: self.lens.clone(),
            r: self.r,
        }
    }

    /// Zeroes raw frames flagged in the `[N·T]` video-rate mask; the audio
    /// view is zeroed over the aligned `r` frames.
    pub fn zero_frames(&mut self, mask: &[bool]) {
        let (t, r) = (self.t(), self.r);
        let vd = self.video.shape()[2];
        let ad = self.audio.shape()[2];
        for (row, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            let (n, f) = (row / t, row % t);
            self.video.data_mut()[(n * t + f) * vd..][..vd].fill(T::ZERO);
            let a0 = (n * r * t + f * r) * ad;
            self.audio.data_mut()[a0..a0 + r * ad].fill(T::ZERO);
        }
    }
}

#[derive(Clone, Debug)]
pub struct VideoExtractor {
    pub frame1: Linear,
    pub frame2: Linear,
    pub temporal: Linear,
    pub proj: Linear,
}

#[derive(Clone, Debug)]
pub struct AudioExtractor {
    pub conv1: Linear,
    pub conv2: Linear,
    pub proj: Linear,
    pub strides: (usize, usize),
}

#[derive(Clone, Debug)]
pub struct Predictor {
    pub input: Option<Linear>,
    pub blocks: Vec<Block>,
    pub output: Option<Linear>,
}

/// Per-block encoder states (before the final norm) and the normalised
/// final state, each `[rows, T, D]`.
#[derive(Clone, Debug)]
pub struct EncoderOutputs {
    pub blocks: Vec<Var>,
    pub last: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub video: VideoExtractor,
    pub audio: AudioExtractor,
    pub fusion: Linear,
    pub mask_token: ParamId,
    pub encoder: Vec<Block>,
    pub encoder_norm: LayerNorm,
    pub embedding: ParamId,
    pub decoder: Vec<Block>,
    pub decoder_norm: LayerNorm,
    pub decoder_out: Linear,
    pub ctc: Linear,
    pub predictor: Predictor,
}

/// Parameter-name prefixes of the components that are re-initialised when
/// a pre-trained encoder is handed to supervised or semi-supervised training.
pub const HEAD_PREFIXES: [&str; 2] = ["decoder.", "ctc."];

impl Model {
    pub fn new<R: Rng>(
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> std::result::Result<(Self, ParamStore<f32>), ModelError> {
        cfg.validate()?;
        let mut s = ParamStore::new();
        let (d, h, v) = (cfg.attn_dim, cfg.extractor_dim, cfg.vocab_total);
        let (s1, s2) = cfg.audio_strides();
        let video = VideoExtractor {
            frame1: Linear::new(&mut s, rng, "video.frame1", cfg.video_dim, h),
            frame2: Linear::new(&mut s, rng, "video.frame2", h, h),
            temporal: Linear::new(&mut s, rng, "video.temporal", 3 * h, h),
            proj: Linear::new(&mut s, rng, "video.proj", h, d),
        };
        let audio = AudioExtractor {
            conv1: Linear::new(&mut s, rng, "audio.conv1", s1 * cfg.audio_dim, h),
            conv2: Linear::new(&mut s, rng, "audio.conv2", s2 * h, h),
            proj: Linear::new(&mut s, rng, "audio.proj", h, d),
            strides: (s1, s2),
        };
        let fusion = Linear::new(&mut s, rng, "fusion", 2 * d, d);
        let mask_token = s.add("mask_token", normal_init(rng, &[d], 1.0));
        let encoder = (0..cfg.encoder_blocks)
            .map(|i| {
                Block::new(&mut s, rng, &format!("encoder.{i}"), d, cfg.attn_heads, cfg.mlp_dim, false)
            })
            .collect();
        let encoder_norm = LayerNorm::new(&mut s, "encoder.norm", d);
        let embedding = s.add("decoder.embedding", normal_init(rng, &[v, d], 1.0));
        let decoder = (0..cfg.decoder_blocks)
            .map(|i| {
                Block::new(&mut s, rng, &format!("decoder.{i}"), d, cfg.attn_heads, cfg.mlp_dim, true)
            })
            .collect();
        let decoder_norm = LayerNorm::new(&mut s, "decoder.norm", d);
        let decoder_out = Linear::new(&mut s, rng, "decoder.out", d, v);
        let ctc = Linear::new(&mut s, rng, "ctc.out", d, v);
        let pd = cfg.predictor_dim;
        let resize = pd != d;
        let predictor = Predictor {
            input: resize.then(|| Linear::new(&mut s, rng, "predictor.in", d, pd)),
            blocks: (0..cfg.predictor_blocks)
                .map(|i| {
                    let name = format!("predictor.{i}");
                    Block::new(&mut s, rng, &name, pd, cfg.attn_heads, 2 * pd, false)
                })
                .collect(),
            output: resize.then(|| Linear::new(&mut s, rng, "predictor.out", pd, d)),
        };
        let model = Self {
            config: cfg.clone(),
            video,
            audio,
            fusion,
            mask_token,
            encoder,
            encoder_norm,
            embedding,
            decoder,
            decoder_norm,
            decoder_out,
            ctc,
            predictor,
        };
        Ok((model, s))
    }

    /// Video features `[N, T, D]` from raw `[N, T, video_dim]`.
    /// Model structure for an existing store (e.g. a loaded checkpoint);
    /// fails if the store does not match the configured layout.
    pub fn for_store(cfg: &ModelConfig, store: &ParamStore<f32>) -> std::result::Result<Self, ModelError> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (m, fresh) = Self::new(cfg, &mut rng)?;
        if !fresh.same_layout(store) {
            return Err(ModelError::Format("parameter layout does not match the model config".into()));
        }
        Ok(m)
    }

    pub fn extract_video<T: Scalar>(&self, ctx: &mut Ctx<T>, video: Var, lens: &[usize]) -> Result<Var> {
        let e = &self.video;
        let h = e.frame1.forward(ctx, video)?;
        let h = ctx.g.gelu(h);
        let h = e.frame2.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        let h = ctx.g.unfold(h, 3, 1, 1, lens)?;
        let h = e.temporal.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        e.proj.forward(ctx, h)
    }

    /// Audio features `[N, T, D]` from raw `[N, r·T, audio_dim]`; `lens` are
    /// video-rate lengths.
    pub fn extract_audio<T: Scalar>(&self, ctx: &mut Ctx<T>, audio: Var, lens: &[usize]) -> Result<Var> {
        let e = &self.audio;
        let (s1, s2) = e.strides;
        let r = s1 * s2;
        let ta = ctx.g.shape(audio).get(1).copied().unwrap_or(0);
        if ta % r != 0 {
            return Err(TensorError::Invalid {
                op: "extract_audio",
                msg: format!("audio length {ta} not divisible by r = {r}"),
            });
        }
        let lens_a: Vec<usize> = lens.iter().map(|&l| l * r).collect();
        let h = ctx.g.unfold(audio, s1, s1, 0, &lens_a)?;
        let h = e.conv1.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        let lens_mid: Vec<usize> = lens.iter().map(|&l| l * s2).collect();
        let h = ctx.g.unfold(h, s2, s2, 0, &lens_mid)?;
        let h = e.conv2.forward(ctx, h)?;
        let h = ctx.g.gelu(h);
        e.proj.forward(ctx, h)
    }

    /// Channel concatenation followed by a linear map back to `D`.
    pub fn fuse_av<T: Scalar>(&self, ctx: &mut Ctx<T>, fv: Var, fa: Var) -> Result<Var> {
        let sv = ctx.g.shape(fv).to_vec();
        if sv != ctx.g.shape(fa) {
            return Err(TensorError::Shape {
                op: "fuse_av",
                lhs: sv,
                rhs: ctx.g.shape(fa).to_vec(),
            });
        }
        let axis = sv.len() - 1;
        let cat = ctx.g.concat(&[fv, fa], axis)?;
        self.fusion.forward(ctx, cat)
    }

    /// Features for the requested modalities stacked on the batch axis:
    /// rows `k·N..(k+1)·N` belong to `modalities[k]`. Frames flagged in
    /// `mask` (`[N·T]`) are replaced by the learned mask token in every
    /// modality.
    pub fn embed<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        batch: &InputBatch<T>,
        modalities: &[Modality],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let need_v = modalities.iter().any(|&m| m != Modality::A);
        let need_a = modalities.iter().any(|&m| m != Modality::V);
        let fv = if need_v {
            let v = ctx.constant(batch.video.clone());
            Some(self.extract_video(ctx, v, &batch.lens)?)
        } else {
            None
        };
        let fa = if need_a {
            let a = ctx.constant(batch.audio.clone());
            Some(self.extract_audio(ctx, a, &batch.lens)?)
        } else {
            None
        };
        let mut parts = Vec::with_capacity(modalities.len());
        let mut fav = None;
        for &m in modalities {
            let f = match m {
                Modality::V => fv.expect("video features"),
                Modality::A => fa.expect("audio features"),
                Modality::Av => match fav {
                    Some(f) => f,
                    None => {
                        let f = self.fuse_av(ctx, fv.expect("video"), fa.expect("audio"))?;
                        fav = Some(f);
                        f
                    }
                },
            };
            parts.push(f);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            ctx.g.concat(&parts, 0)?
        };
        match mask {
            Some(mask) if mask.iter().any(|&b| b) => {
                let rows: Vec<bool> = mask.repeat(modalities.len());
                let tok = ctx.p(self.mask_token);
                ctx.g.replace_rows(x, tok, &rows)
            }
            _ => Ok(x),
        }
    }

    /// Pre-LN encoder over `[rows, T, D]` features with per-row lengths.
    pub fn encode<T: Scalar>(&self, ctx: &mut Ctx<T>, x: Var, lens: &[usize]) -> Result<EncoderOutputs> {
        let shape = ctx.g.shape(x).to_vec();
        let pe = ctx.constant(positions(shape[1], shape[2]));
        let mut h = ctx.g.add_broadcast(x, pe)?;
        let mut blocks = Vec::with_capacity(self.encoder.len());
        for b in &self.encoder {
            h = b.forward(ctx, h, lens, false, None)?;
            blocks.push(h);
        }
        let last = self.encoder_norm.forward(ctx, h)?;
        Ok(EncoderOutputs { blocks, last })
    }

    /// CTC log-probabilities `[rows, T, vocab_total]`.
    pub fn ctc_head<T: Scalar>(&self, ctx: &mut Ctx<T>, enc: Var) -> Result<Var> {
        let logits = self.ctc.forward(ctx, enc)?;
        let axis = ctx.g.shape(logits).len() - 1;
        ctx.g.log_softmax(logits, axis)
    }

    /// Teacher-forced decoder logits `[rows, L, vocab_total]`. Each row of
    /// `y_in` starts with sos; rows are padded to the longest.
    pub fn decode<T: Scalar>(
        &self,
        ctx: &mut Ctx<T>,
        enc: Var,
        enc_lens: &[usize],
        y_in: &[Vec<usize>],
    ) -> Result<Var> {
        let rows = y_in.len();
        let d = self.config.attn_dim;
        let l = y_in.iter().map(Vec::len).max().unwrap_or(0);
        if l == 0 {
            return Err(TensorError::Empty("decode"));
        }
        let pad = self.config.vocab().pad();
        let ids: Vec<usize> = y_in
            .iter()
            .flat_map(|y| y.iter().copied().chain(std::iter::repeat(pad)).take(l))
            .collect();
        let lens: Vec<usize> = y_in.iter().map(Vec::len).collect();
        let table = ctx.p(self.embedding);
        let e = ctx.g.gather_rows(table, &ids)?;
        let e = ctx.g.reshape(e, &[rows, l, d])?;
        let pe = ctx.constant(positions(l, d));
        let mut h = ctx.g.add_broadcast(e, pe)?;
        for b in &self.decoder {
            h = b.forward(ctx, h, &lens, true, Some((enc, enc_lens)))?;
        }
        let h = self.decoder_norm.forward(ctx, h)?;
        self.decoder_out.forward(ctx, h)
    }

    /// Predictions `[rows, T, D]` from the student's final encoder states.
    pub fn predict<T: Scalar>(&self, ctx: &mut Ctx<T>, enc: Var, lens: &[usize]) -> Result<Var> {
        let p = &self.predictor;
        let mut h = match &p.input {
            Some(l) => l.forward(ctx, enc)?,
            None => enc,
        };
        for b in &p.blocks {
            h = b.forward(ctx, h, lens, false, None)?;
        }
        match &p.output {
            Some(l) => l.forward(ctx, h),
            None => Ok(h),
        }
    }

    /// Parameter ids read by the given modality's extractor path only.
    pub fn extractor_params(&self, m: Modality) -> Vec<ParamId> {
        let lin = |l: &Linear| [l.w, l.b];
        let v = &self.video;
        let a = &self.audio;
        let video: Vec<ParamId> = [&v.frame1, &v.frame2, &v.temporal, &v.proj]
            .into_iter()
            .flat_map(lin)
            .collect();
        let audio: Vec<ParamId> = [&a.conv1, &a.conv2, &a.proj].into_iter().flat_map(lin).collect();
        match m {
            Modality::V => video,
            Modality::A => audio,
            Modality::Av => lin(&self.fusion).to_vec(),
        }
    }
}

/// Repeats per-sample values once per stacked modality.
pub fn stack_lens(lens: &[usize], modalities: usize) -> Vec<usize> {
    lens.repeat(modalities)
}

/// Splits stacked rows back into per-modality row ranges.
pub fn modality_rows(n: usize, modalities: &[Modality]) -> Vec<(Modality, std::ops::Range<usize>)> {
    modalities
        .iter()
        .enumerate()
        .map(|(k, &m)| (m, k * n..(k + 1) * n))
        .collect()
}
