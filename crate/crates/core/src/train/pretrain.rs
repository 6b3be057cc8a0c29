use log::info;

use super::supervised::{backward, update};
use super::*;
use crate::autodiff::{Tensor, Var};
use crate::data::Corpus;
use crate::model::{stack_lens, HEAD_PREFIXES};
use crate::pretrain::{build_targets, flatten_masks, masked_cosine_loss, pretrain_loss, sample_span_mask};
use crate::pseudo_label::{ema_update, momentum_schedule};

const PRE_SPLIT: u64 = 3;

/// Copies every pre-trained parameter except the decoder and CTC heads,
/// which keep their fresh initialisation.
pub fn init_from_pretrained(fresh: &ParamStore<f32>, pre: &ParamStore<f32>) -> Result<ParamStore<f32>> {
    if !fresh.same_layout(pre) {
        return Err(TrainError::Config("init: pre-trained checkpoint has a different model layout".into()));
    }
    let mut out = fresh.clone();
    let ids: Vec<_> = pre.iter().map(|(id, _)| id).collect();
    for id in ids {
        if HEAD_PREFIXES.iter().any(|h| pre.name(id).starts_with(h)) {
            continue;
        }
        *out.get_mut(id) = pre.get(id).clone();
    }
    Ok(out)
}

/// Student side of one pre-training step: every modality of the masked
/// batch predicts the shared `targets` at masked video positions. Returns
/// the weighted loss and the per-modality cosine losses.
pub fn masked_prediction_step<T: Scalar>(
    model: &Model,
    ctx: &mut Ctx<T>,
    masked: &InputBatch<T>,
    flat_mask: &[bool],
    video_masks: &[Vec<bool>],
    targets: Tensor<T>,
    w: &LossWeights,
) -> Result<(Var, Vec<(Modality, Var)>)> {
    let n = masked.n();
    let x = model.embed(ctx, masked, &Modality::ALL, Some(flat_mask))?;
    let lens = stack_lens(&masked.lens, Modality::ALL.len());
    let enc = model.encode(ctx, x, &lens)?.last;
    let pred = model.predict(ctx, enc, &lens)?;
    let tgt = ctx.constant(targets);
    let mut per_mod = Vec::with_capacity(3);
    for (k, &m) in Modality::ALL.iter().enumerate() {
        let p = ctx.g.narrow(pred, 0, k * n, n)?;
        let l = masked_cosine_loss(&mut ctx.g, p, tgt, video_masks, n)?;
        per_mod.push((m, l));
    }
    let loss = pretrain_loss(&mut ctx.g, &per_mod, w)?;
    Ok((loss, per_mod))
}

/// Masked-prediction pre-training on every training utterance (labels are
/// ignored). Targets come from the EMA teacher on the unmasked `target`
/// view; the student predicts them from span-masked inputs in all three
/// modalities.
pub fn run_pretrain(corpus: &Corpus, cfg: &TrainConfig, mut metrics: Metrics) -> Result<TrainOutput> {
    cfg.validate()?;
    let views: Vec<&Views> = corpus
        .labelled
        .iter()
        .map(|s| &s.views)
        .chain(corpus.unlabelled.iter().map(|s| &s.views))
        .collect();
    if views.is_empty() {
        return Err(TrainError::Config("corpus has no training utterances".into()));
    }
    let o = &cfg.optim;
    let model_cfg = cfg.model_config(&corpus.config)?;
    let (model, mut store) = fresh_model(&model_cfg, o.seed)?;
    let mut teacher = store.clone();
    let mut opt = AdamW::new(&store, o);
    let frames: Vec<usize> = views.iter().map(|v| v.video_frames()).collect();
    let spe = batches_per_epoch(frames.len(), o.batch_unlabelled);
    let sched = LrSchedule::new(o, spe);
    let mut batches = BatchStream::new(frames, o.seed, PRE_SPLIT, o.batch_unlabelled, o.max_batch_frames);
    let r = model_cfg.audio_rate_ratio;
    let mut stats = RunStats::default();
    for epoch in 0..o.total_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..spe {
            let step = stats.steps;
            let idx = batches.next_batch();
            let bv: Vec<&Views> = idx.iter().map(|&i| views[i]).collect();
            let clean: InputBatch<f32> = InputBatch::from_views(&bv)?;
            let targets = build_targets(&model, &teacher, &clean, cfg.pretrain_target)?;
            let masks: Vec<_> = clean
                .lens
                .iter()
                .enumerate()
                .map(|(i, &len)| sample_span_mask(len, &cfg.mask, r, &mut step_rng(o.seed, MASK_TAG, step, i)))
                .collect();
            let flat = flatten_masks(&masks, clean.t());
            let mut masked = clean.clone();
            masked.zero_frames(&flat);
            let video_masks: Vec<Vec<bool>> = masks.iter().map(|m| m.video.clone()).collect();

            let mut ctx = Ctx::train(&store);
            let (loss, per_mod) = masked_prediction_step(&model, &mut ctx, &masked, &flat, &video_masks, targets, &cfg.loss)?;
            for &(m, l) in &per_mod {
                metrics.log(epoch, step, "train", Some(m.name()), "cosine_loss", ctx.g.value(l).data()[0] as f64)?;
            }
            let lr = lr_schedule(step, &sched);
            let (lv, grads) = backward(&mut ctx, loss)?;
            drop(ctx);
            metrics.log(epoch, step, "train", None, "loss", lv)?;
            if let Some(norm) = update(&mut opt, &mut store, grads, lr, &mut stats) {
                metrics.log(epoch, step, "train", None, "grad_norm", norm)?;
            }
            ema_update(&mut teacher, &store, momentum_schedule(step, sched.total_steps, cfg.ema_mu0))?;
            epoch_loss += lv;
            stats.steps += 1;
        }
        metrics.log(epoch, stats.steps, "train", None, "epoch_loss", epoch_loss / spe as f64)?;
        info!("pretrain epoch {epoch}: loss {:.4}", epoch_loss / spe as f64);
    }
    metrics.flush()?;
    stats.check()?;
    Ok(TrainOutput {
        model,
        students: vec![(Modality::ALL.to_vec(), store)],
        teacher: Some(teacher),
        optimizer: Some(opt.state),
        metrics,
        stats,
    })
}
