//! Optimiser, schedules, the supervised / semi-supervised / pre-training
//! loops, run manifests and experiment helpers.

mod manifest;
mod metrics;
mod optim;
mod pretrain;
mod semi;
mod supervised;

pub use manifest::{apply_override, RunManifest, Stage};
pub use metrics::{read_metrics, MetricRecord, Metrics};
pub use optim::{clip_global_norm, lr_schedule, AdamW, LrSchedule, OptimConfig, StepOutcome};
pub use pretrain::{init_from_pretrained, masked_prediction_step, run_pretrain};
pub use semi::train_semi;
pub use supervised::{student_step, train_supervised, StudentStep};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Ctx, ParamStore, Scalar, TensorError};
use crate::data::{AugmentConfig, CorpusConfig, DataError, LabelledSample, Views};
use crate::decode::{evaluate, DecodeConfig, DecodeError, EvalConfig, EvalReport};
use crate::exec::Exec;
use crate::losses::{ctc_loss, LossWeights};
use crate::model::{InputBatch, Modality, Model, ModelConfig, ModelError, OptimizerState};
use crate::pretrain::SpanMaskConfig;
use crate::rng::stream;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{skipped} of {steps} steps had non-finite gradients (limit 1%)")]
    Diverged { skipped: usize, steps: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Optional fine-tuning regularisers, both off by default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FineTuneTricks {
    /// Freezes the feature extractors, fusion, mask token and the first
    /// `k` encoder blocks.
    pub freeze_encoder_blocks: usize,
    /// Encoder block `i` of `n` trains at `decay^(n − i)` times the base
    /// learning rate; front-end parameters at `decay^(n + 1)`.
    pub layer_lr_decay: f64,
}

impl Default for FineTuneTricks {
    fn default() -> Self {
        Self {
            freeze_encoder_blocks: 0,
            layer_lr_decay: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub augment: AugmentConfig,
    pub mask: SpanMaskConfig,
    pub decode: DecodeConfig,
    /// Initial EMA momentum; rises to 1 on a cosine schedule.
    pub ema_mu0: f64,
    pub pretrain_target: Modality,
    /// One model for all modalities; `false` trains one model per modality.
    pub shared: bool,
    pub tricks: FineTuneTricks,
    /// Validation (teacher-forced accuracy, CTC loss) every this many
    /// epochs; 0 disables.
    pub validate_every: usize,
    /// Modalities decoded on the eval split after training.
    pub eval_modalities: Vec<Modality>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            loss: LossWeights::default(),
            optim: OptimConfig::default(),
            augment: AugmentConfig::default(),
            mask: SpanMaskConfig::default(),
            decode: DecodeConfig::default(),
            ema_mu0: 0.999,
            pretrain_target: Modality::Av,
            shared: true,
            tricks: FineTuneTricks::default(),
            validate_every: 1,
            eval_modalities: Modality::ALL.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.loss.validate().map_err(|e| TrainError::Config(format!("loss: {e}")))?;
        self.augment.validate().map_err(|e| TrainError::Config(format!("augment: {e}")))?;
        self.decode.validate().map_err(|e| TrainError::Config(format!("decode: {e}")))?;
        if !(0.0..=1.0).contains(&self.ema_mu0) {
            return Err(TrainError::Config(format!("ema_mu0: {} outside [0, 1]", self.ema_mu0)));
        }
        if !(0.0..=1.0).contains(&self.mask.start_prob) || self.mask.span_frames == 0 {
            return Err(TrainError::Config("mask: start_prob in [0, 1], span_frames > 0".into()));
        }
        if !(self.tricks.layer_lr_decay > 0.0 && self.tricks.layer_lr_decay <= 1.0) {
            return Err(TrainError::Config("tricks.layer_lr_decay: must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, corpus: &CorpusConfig) -> Result<ModelConfig> {
        let cfg = ModelConfig::preset(
            &self.preset,
            corpus.vocab(),
            corpus.video_dim,
            corpus.audio_dim,
            corpus.audio_rate_ratio,
        )?;
        if self.tricks.freeze_encoder_blocks > cfg.encoder_blocks {
            return Err(TrainError::Config(format!(
                "tricks.freeze_encoder_blocks: {} exceeds {} encoder blocks",
                self.tricks.freeze_encoder_blocks, cfg.encoder_blocks
            )));
        }
        Ok(cfg)
    }
}

pub(crate) const INIT_TAG: u64 = 0x494e_4954;
const SHUFFLE_TAG: u64 = 0x5348_5546;
pub(crate) const AUG_LAB_TAG: u64 = 0x4155_474c;
pub(crate) const AUG_UNLAB_TAG: u64 = 0x4155_4755;
pub(crate) const MASK_TAG: u64 = 0x4d41_534b;

/// Model and parameters a run with `seed` starts from.
pub fn fresh_model(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, INIT_TAG, 0));
    Ok(Model::new(cfg, &mut rng)?)
}

/// RNG for item `index` at global step `step` of stream `tag`.
pub(crate) fn step_rng(seed: u64, tag: u64, step: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream(seed, tag, ((step as u64) << 24) ^ index as u64))
}

/// Count-based batches over a per-epoch shuffle of `0..n`. With a frame cap
/// each batch keeps its longest prefix within the cap (never empty); the
/// overflow is not seen this epoch.
pub(crate) fn epoch_batches(
    frames: &[usize],
    seed: u64,
    split_tag: u64,
    epoch: usize,
    batch: usize,
    max_frames: usize,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..frames.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(stream(seed, SHUFFLE_TAG ^ split_tag, epoch as u64));
    order.shuffle(&mut rng);
    order
        .chunks(batch)
        .map(|c| {
            if max_frames == 0 {
                return c.to_vec();
            }
            let mut total = 0;
            let mut out = Vec::new();
            for &i in c {
                total += frames[i];
                if total > max_frames && !out.is_empty() {
                    break;
                }
                out.push(i);
            }
            out
        })
        .collect()
}

pub(crate) fn batches_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch)
}

/// Cycles through epochs of shuffled batches.
pub(crate) struct BatchStream {
    frames: Vec<usize>,
    seed: u64,
    tag: u64,
    batch: usize,
    max_frames: usize,
    epoch: usize,
    queue: std::collections::VecDeque<Vec<usize>>,
}

impl BatchStream {
    pub(crate) fn new(frames: Vec<usize>, seed: u64, tag: u64, batch: usize, max_frames: usize) -> Self {
        Self {
            frames,
            seed,
            tag,
            batch,
            max_frames,
            epoch: 0,
            queue: Default::default(),
        }
    }

    pub(crate) fn next_batch(&mut self) -> Vec<usize> {
        if self.queue.is_empty() {
            self.queue = epoch_batches(&self.frames, self.seed, self.tag, self.epoch, self.batch, self.max_frames).into();
            self.epoch += 1;
        }
        self.queue.pop_front().expect("non-empty split")
    }
}

/// Learning-rate multipliers for the fine-tuning tricks.
pub(crate) fn lr_scales(model: &Model, store: &ParamStore<f32>, tricks: &FineTuneTricks) -> Vec<f64> {
    let n = model.config.encoder_blocks;
    let frontend = ["video.", "audio.", "fusion", "mask_token"];
    store
        .iter()
        .map(|(_, p)| {
            let name = p.name.as_str();
            let block = name
                .strip_prefix("encoder.")
                .and_then(|r| r.split('.').next())
                .and_then(|i| i.parse::<usize>().ok());
            let is_front = frontend.iter().any(|f| name.starts_with(f));
            let frozen = tricks.freeze_encoder_blocks > 0
                && (is_front || block.is_some_and(|i| i < tricks.freeze_encoder_blocks));
            if frozen {
                return 0.0;
            }
            let d = tricks.layer_lr_decay;
            match block {
                Some(i) => d.powi((n - i) as i32),
                None if is_front => d.powi(n as i32 + 1),
                None => 1.0,
            }
        })
        .collect()
}

/// Bookkeeping shared by all loops.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub steps: usize,
    pub skipped: usize,
    /// Teacher rows run per step (semi-supervised only).
    pub teacher_rows: Vec<usize>,
}

impl RunStats {
    pub(crate) fn check(&self) -> Result<()> {
        if self.skipped * 100 > self.steps {
            return Err(TrainError::Diverged {
                skipped: self.skipped,
                steps: self.steps,
            });
        }
        Ok(())
    }
}

/// A trained run: one student per modality group (a single entry when the
/// model is shared) plus the EMA teacher, if any.
pub struct TrainOutput {
    pub model: Model,
    pub students: Vec<(Vec<Modality>, ParamStore<f32>)>,
    pub teacher: Option<ParamStore<f32>>,
    pub optimizer: Option<OptimizerState>,
    pub metrics: Metrics,
    pub stats: RunStats,
}

impl TrainOutput {
    pub fn store_for(&self, m: Modality) -> &ParamStore<f32> {
        &self
            .students
            .iter()
            .find(|(ms, _)| ms.contains(&m))
            .expect("every modality has a student")
            .1
    }

    /// Decodes the eval split in each modality with the serving student and
    /// logs the WERs.
    pub fn evaluate(
        &mut self,
        eval: &[LabelledSample],
        modalities: &[Modality],
        cfg: &EvalConfig,
        exec: Exec,
    ) -> Result<Vec<EvalReport>> {
        let mut out = Vec::with_capacity(modalities.len());
        for &m in modalities {
            let r = evaluate(&self.model, self.store_for(m), eval, m, cfg, exec)?;
            let split = if cfg.snr_db.is_some() { "eval_noisy" } else { "eval" };
            let epoch = self.metrics.records.last().map_or(0, |r| r.epoch);
            self.metrics.log(epoch, self.stats.steps, split, Some(m.name()), "wer", r.summary.wer)?;
            out.push(r);
        }
        self.metrics.flush()?;
        Ok(out)
    }
}

/// Teacher-forced attention accuracy and mean per-utterance CTC loss of
/// `store` on `samples` in modality `m`.
pub fn validation_scores(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[LabelledSample],
    m: Modality,
) -> Result<(f64, f64)> {
    let vocab = model.config.vocab();
    let vt = model.config.vocab_total;
    let (mut correct, mut total, mut ctc_sum, mut ctc_n) = (0usize, 0usize, 0.0, 0usize);
    for chunk in samples.chunks(32) {
        let views: Vec<&Views> = chunk.iter().map(|s| &s.views).collect();
        let batch: InputBatch<f32> = InputBatch::from_views(&views)?;
        let mut ctx = Ctx::frozen(store);
        let x = model.embed(&mut ctx, &batch, &[m], None)?;
        let enc = model.encode(&mut ctx, x, &batch.lens)?.last;
        let lp = model.ctc_head(&mut ctx, enc)?;
        let y_in: Vec<Vec<usize>> = chunk
            .iter()
            .map(|s| std::iter::once(vocab.sos()).chain(s.labels.iter().copied()).collect())
            .collect();
        let logits = model.decode(&mut ctx, enc, &batch.lens, &y_in)?;
        let l = ctx.g.shape(logits)[1];
        let t = batch.t();
        let lv = ctx.g.value(logits).data();
        let pv = ctx.g.value(lp).data();
        for (r, s) in chunk.iter().enumerate() {
            let targets = s.labels.iter().copied().chain(std::iter::once(vocab.eos()));
            for (j, y) in targets.enumerate() {
                let row = &lv[(r * l + j) * vt..][..vt];
                let mut k = 0;
                for (i, &x) in row.iter().enumerate() {
                    if x > row[k] {
                        k = i;
                    }
                }
                correct += usize::from(k == y);
                total += 1;
            }
            let len = batch.lens[r];
            let block: Vec<f64> = pv[r * t * vt..(r * t + len) * vt].iter().map(|&x| x as f64).collect();
            if let Some(res) = ctc_loss(&block, len, vt, &s.labels, vocab.blank()) {
                ctc_sum += res.loss;
                ctc_n += 1;
            }
        }
    }
    let acc = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    let ctc = if ctc_n == 0 { f64::NAN } else { ctc_sum / ctc_n as f64 };
    Ok((acc, ctc))
}

pub(crate) fn log_validation(
    metrics: &mut Metrics,
    model: &Model,
    students: &[(Vec<Modality>, ParamStore<f32>)],
    eval: &[LabelledSample],
    epoch: usize,
    step: usize,
) -> Result<()> {
    if eval.is_empty() {
        return Ok(());
    }
    for (ms, store) in students {
        for &m in ms {
            let (acc, ctc) = validation_scores(model, store, eval, m)?;
            metrics.log(epoch, step, "val", Some(m.name()), "attention_accuracy", acc)?;
            metrics.log(epoch, step, "val", Some(m.name()), "ctc_loss", ctc)?;
        }
    }
    Ok(())
}

/// Augmented copies of `samples[idx]` for step `step`.
pub(crate) fn augmented_views<'a>(
    views: impl Iterator<Item = &'a Views>,
    cfg: &AugmentConfig,
    seed: u64,
    tag: u64,
    step: usize,
) -> Vec<Views> {
    views
        .enumerate()
        .map(|(i, v)| {
            let mut rng = step_rng(seed, tag, step, i);
            crate::data::zero_mask_augment(v, cfg, &mut rng)
        })
        .collect()
}

/// Runs `run` once per seed, in parallel when `exec` allows. Results come
/// back in seed order.
pub fn sweep_seeds<T, F>(seeds: &[u64], exec: Exec, run: F) -> Vec<T>
where
    T: Send,
    F: Fn(u64) -> T + Sync + Send,
{
    exec.map(seeds, |&s| run(s))
}

/// Median of a non-empty sample; the mean of the two middle values for even
/// lengths. NaN sorts last.
pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[cfg(test)]
mod tests;
