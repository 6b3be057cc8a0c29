use log::{info, warn};

use super::*;
use crate::autodiff::{Grads, Var};
use crate::data::Corpus;
use crate::losses::{
    attention_ce_loss, combine_modality, ctc_batch_loss, semi_loss, supervised_loss, unlabelled_attention_loss,
    unlabelled_ctc_loss, PerModalityLosses,
};
use crate::model::stack_lens;
use crate::pseudo_label::PseudoLabelSet;

pub(crate) const LAB_SPLIT: u64 = 1;

/// Student graph for one step: `views` holds the labelled samples first,
/// followed by any unlabelled ones carrying pseudo-labels.
pub struct StudentStep {
    pub loss: Var,
    pub labelled: PerModalityLosses,
    pub unlabelled: Option<PerModalityLosses>,
    pub ctc_skipped: usize,
}

/// Builds the student loss for one batch. With one modality the loss is
/// that modality's combined loss, with all three the weighted supervised
/// loss, and with `pseudo` the semi-supervised loss.
pub fn student_step<T: Scalar>(
    model: &Model,
    ctx: &mut Ctx<T>,
    views: &[Views],
    labels: &[Vec<usize>],
    pseudo: Option<(&[PseudoLabelSet], f64)>,
    modalities: &[Modality],
    w: &LossWeights,
) -> Result<StudentStep> {
    let vocab = model.config.vocab();
    let n_lab = labels.len();
    let n = views.len();
    let refs: Vec<&Views> = views.iter().collect();
    let batch: InputBatch<T> = InputBatch::from_views(&refs)?;
    let lens = &batch.lens;
    let x = model.embed(ctx, &batch, modalities, None)?;
    let all_lens = stack_lens(lens, modalities.len());
    let enc = model.encode(ctx, x, &all_lens)?.last;
    let logp = model.ctc_head(ctx, enc)?;

    let mut y_in: Vec<Vec<usize>> = Vec::with_capacity(n * modalities.len());
    let mut lab_targets = Vec::with_capacity(n_lab);
    for l in labels {
        lab_targets.push(l.iter().copied().chain(std::iter::once(vocab.eos())).collect::<Vec<_>>());
    }
    let unlab_tokens: Vec<&[usize]> = pseudo.map_or(Vec::new(), |(p, _)| p.iter().map(|s| s.attn_tokens.as_slice()).collect());
    for _ in modalities {
        for l in labels {
            y_in.push(std::iter::once(vocab.sos()).chain(l.iter().copied()).collect());
        }
        for t in &unlab_tokens {
            y_in.push(std::iter::once(vocab.sos()).chain(t[..t.len() - 1].iter().copied()).collect());
        }
    }
    let logits = model.decode(ctx, enc, &all_lens, &y_in)?;

    let g = &mut ctx.g;
    let mut labelled = PerModalityLosses::default();
    let mut unlabelled = pseudo.map(|_| PerModalityLosses::default());
    let mut ctc_skipped = 0;
    let inv_b = 1.0 / n_lab as f64;
    for (k, &m) in modalities.iter().enumerate() {
        let start = k * n;
        let lp = g.narrow(logp, 0, start, n_lab)?;
        let (ctc, skipped) = ctc_batch_loss(g, lp, &lens[..n_lab], labels, vocab.blank(), inv_b)?;
        ctc_skipped += skipped;
        let lg = g.narrow(logits, 0, start, n_lab)?;
        let att = attention_ce_loss(g, lg, &lab_targets, inv_b)?;
        labelled.insert(m, combine_modality(g, ctc, att, w)?);
        if let (Some((sets, tau)), Some(un)) = (pseudo, unlabelled.as_mut()) {
            let bu = sets.len();
            let lp = g.narrow(logp, 0, start + n_lab, bu)?;
            let frames: Vec<Vec<usize>> = sets.iter().map(|s| s.ctc_frames.clone()).collect();
            let cmask: Vec<Vec<bool>> = sets.iter().map(|s| s.ctc_mask(tau)).collect();
            let ctc = unlabelled_ctc_loss(g, lp, &lens[n_lab..], &frames, &cmask, bu)?;
            let lg = g.narrow(logits, 0, start + n_lab, bu)?;
            let toks: Vec<Vec<usize>> = sets.iter().map(|s| s.attn_tokens.clone()).collect();
            let amask: Vec<Vec<bool>> = sets.iter().map(|s| s.attn_mask(tau)).collect();
            let att = unlabelled_attention_loss(g, lg, &toks, &amask, bu)?;
            un.insert(m, combine_modality(g, ctc, att, w)?);
        }
    }
    let loss = match (&unlabelled, modalities) {
        (Some(un), _) => semi_loss(g, &labelled, un, w)?,
        (None, [m]) => labelled.get(*m).expect("inserted").combined,
        (None, _) => supervised_loss(g, &labelled, w)?,
    };
    Ok(StudentStep {
        loss,
        labelled,
        unlabelled,
        ctc_skipped,
    })
}

/// Loss value and parameter gradients; `None` gradients when the loss is
/// not finite.
pub(crate) fn backward(ctx: &mut Ctx<f32>, loss: Var) -> Result<(f64, Option<Grads<f32>>)> {
    let lv = ctx.g.value(loss).data()[0] as f64;
    if !lv.is_finite() {
        return Ok((lv, None));
    }
    ctx.backward(loss)?;
    let mut grads = Grads::zeros_like(ctx.store());
    ctx.accumulate_into(&mut grads);
    Ok((lv, Some(grads)))
}

/// Optimiser update, counting skipped steps in `stats`.
pub(crate) fn update(
    opt: &mut AdamW,
    store: &mut ParamStore<f32>,
    grads: Option<Grads<f32>>,
    lr: f64,
    stats: &mut RunStats,
) -> Option<f64> {
    let outcome = match grads {
        Some(mut g) => opt.step(store, &mut g, lr),
        None => {
            opt.skipped += 1;
            StepOutcome::Skipped
        }
    };
    match outcome {
        StepOutcome::Applied { grad_norm } => Some(grad_norm),
        StepOutcome::Skipped => {
            warn!("step {}: non-finite loss or gradients, update skipped", stats.steps);
            stats.skipped += 1;
            None
        }
    }
}

pub(crate) fn log_modality_losses(
    metrics: &mut Metrics,
    g: &crate::autodiff::Graph<f32>,
    epoch: usize,
    step: usize,
    split: &str,
    per_mod: &PerModalityLosses,
) -> Result<()> {
    for (m, l) in &per_mod.0 {
        metrics.log(epoch, step, split, Some(m.name()), "ctc_loss", g.value(l.ctc).data()[0] as f64)?;
        metrics.log(epoch, step, split, Some(m.name()), "attention_loss", g.value(l.attention).data()[0] as f64)?;
    }
    Ok(())
}

/// Supervised training on the labelled split. With `cfg.shared` one model
/// learns all three modalities from the weighted loss; otherwise one model
/// per modality is trained on its own loss at the same step budget.
pub fn train_supervised(corpus: &Corpus, cfg: &TrainConfig, mut metrics: Metrics) -> Result<TrainOutput> {
    cfg.validate()?;
    if corpus.labelled.is_empty() {
        return Err(TrainError::Config("corpus has no labelled utterances".into()));
    }
    let model_cfg = cfg.model_config(&corpus.config)?;
    let groups: Vec<Vec<Modality>> = if cfg.shared {
        vec![Modality::ALL.to_vec()]
    } else {
        Modality::ALL.iter().map(|&m| vec![m]).collect()
    };
    let mut students = Vec::new();
    let mut stats = RunStats::default();
    let mut model = None;
    let mut optimizer = None;
    for group in groups {
        let (m, store, opt, s) = supervised_group(corpus, cfg, &model_cfg, &group, &mut metrics)?;
        stats.steps += s.steps;
        stats.skipped += s.skipped;
        model = Some(m);
        optimizer = Some(opt);
        students.push((group, store));
    }
    metrics.flush()?;
    stats.check()?;
    Ok(TrainOutput {
        model: model.expect("at least one group"),
        students,
        teacher: None,
        optimizer,
        metrics,
        stats,
    })
}

fn supervised_group(
    corpus: &Corpus,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    modalities: &[Modality],
    metrics: &mut Metrics,
) -> Result<(Model, ParamStore<f32>, OptimizerState, RunStats)> {
    let o = &cfg.optim;
    let (model, mut store) = fresh_model(model_cfg, o.seed)?;
    let mut opt = AdamW::new(&store, o);
    opt.lr_scale = lr_scales(&model, &store, &cfg.tricks);
    let frames: Vec<usize> = corpus.labelled.iter().map(|s| s.views.video_frames()).collect();
    let spe = batches_per_epoch(frames.len(), o.batch_labelled);
    let sched = LrSchedule::new(o, spe);
    let mut batches = BatchStream::new(frames, o.seed, LAB_SPLIT, o.batch_labelled, o.max_batch_frames);
    // unshared runs tag their records with the trained modality
    let tag = (modalities.len() == 1).then(|| modalities[0].name());
    let mut stats = RunStats::default();
    for epoch in 0..o.total_epochs {
        let mut epoch_loss = 0.0;
        for _ in 0..spe {
            let step = stats.steps;
            let idx = batches.next_batch();
            let views = augmented_views(idx.iter().map(|&i| &corpus.labelled[i].views), &cfg.augment, o.seed, AUG_LAB_TAG, step);
            let labels: Vec<Vec<usize>> = idx.iter().map(|&i| corpus.labelled[i].labels.clone()).collect();
            let mut ctx = Ctx::train(&store);
            let st = student_step(&model, &mut ctx, &views, &labels, None, modalities, &cfg.loss)?;
            let lr = lr_schedule(step, &sched);
            let (lv, grads) = backward(&mut ctx, st.loss)?;
            if st.ctc_skipped > 0 {
                metrics.log(epoch, step, "train", None, "ctc_infeasible_rows", st.ctc_skipped as f64)?;
            }
            log_modality_losses(metrics, &ctx.g, epoch, step, "train", &st.labelled)?;
            drop(ctx);
            metrics.log(epoch, step, "train", tag, "loss", lv)?;
            if let Some(norm) = update(&mut opt, &mut store, grads, lr, &mut stats) {
                metrics.log(epoch, step, "train", tag, "grad_norm", norm)?;
            }
            epoch_loss += lv;
            stats.steps += 1;
        }
        metrics.log(epoch, stats.steps, "train", tag, "epoch_loss", epoch_loss / spe as f64)?;
        info!(
            "supervised ({}) epoch {epoch}: loss {:.4}",
            tag.unwrap_or("shared"),
            epoch_loss / spe as f64
        );
        if cfg.validate_every > 0 && (epoch + 1) % cfg.validate_every == 0 {
            let s = [(modalities.to_vec(), store.clone())];
            log_validation(metrics, &model, &s, &corpus.eval, epoch, stats.steps)?;
        }
    }
    Ok((model, store, opt.state, stats))
}
