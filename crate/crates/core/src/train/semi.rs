use log::{info, warn};

use super::supervised::{backward, log_modality_losses, student_step, update, LAB_SPLIT};
use super::*;
use crate::data::Corpus;
use crate::pseudo_label::{ema_update, generate_pseudo_labels, momentum_schedule, KeptStats};

const UNLAB_SPLIT: u64 = 2;

/// Semi-supervised training with an EMA teacher. Each step the teacher
/// labels the unmasked audiovisual view of `B^u` unlabelled samples once;
/// the student sees augmented labelled and unlabelled samples in all three
/// modalities in one stacked batch. `init` is a pre-trained store whose
/// encoder-side weights initialise both student and teacher.
pub fn train_semi(
    corpus: &Corpus,
    cfg: &TrainConfig,
    init: Option<&ParamStore<f32>>,
    mut metrics: Metrics,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if !cfg.shared {
        return Err(TrainError::Config("shared: semi-supervised training requires a shared model".into()));
    }
    if corpus.labelled.is_empty() {
        return Err(TrainError::Config("corpus has no labelled utterances".into()));
    }
    let has_unlab = !corpus.unlabelled.is_empty();
    if !has_unlab {
        warn!("no unlabelled utterances; falling back to supervised training");
    }
    let o = &cfg.optim;
    let model_cfg = cfg.model_config(&corpus.config)?;
    let (model, fresh) = fresh_model(&model_cfg, o.seed)?;
    let mut store = match init {
        Some(pre) => init_from_pretrained(&fresh, pre)?,
        None => fresh,
    };
    let mut teacher = store.clone();
    let mut opt = AdamW::new(&store, o);
    opt.lr_scale = lr_scales(&model, &store, &cfg.tricks);

    let lab_frames: Vec<usize> = corpus.labelled.iter().map(|s| s.views.video_frames()).collect();
    let unlab_frames: Vec<usize> = corpus.unlabelled.iter().map(|s| s.views.video_frames()).collect();
    let spe = batches_per_epoch(lab_frames.len(), o.batch_labelled)
        .max(batches_per_epoch(unlab_frames.len(), o.batch_unlabelled));
    let sched = LrSchedule::new(o, spe);
    let mut lab = BatchStream::new(lab_frames, o.seed, LAB_SPLIT, o.batch_labelled, o.max_batch_frames);
    let mut unlab = BatchStream::new(unlab_frames, o.seed, UNLAB_SPLIT, o.batch_unlabelled, o.max_batch_frames);
    let tau = cfg.loss.tau;
    let mut stats = RunStats::default();
    for epoch in 0..o.total_epochs {
        let mut kept = KeptStats::default();
        let mut epoch_loss = 0.0;
        for _ in 0..spe {
            let step = stats.steps;
            let li = lab.next_batch();
            let mut views = augmented_views(li.iter().map(|&i| &corpus.labelled[i].views), &cfg.augment, o.seed, AUG_LAB_TAG, step);
            let labels: Vec<Vec<usize>> = li.iter().map(|&i| corpus.labelled[i].labels.clone()).collect();
            let pseudo = if has_unlab {
                let ui = unlab.next_batch();
                let clean: Vec<&Views> = ui.iter().map(|&i| &corpus.unlabelled[i].views).collect();
                let batch: InputBatch<f32> = InputBatch::from_views(&clean)?;
                let sets = generate_pseudo_labels(&model, &teacher, &batch)?;
                stats.teacher_rows.push(batch.n());
                for p in &sets {
                    kept.record(p, tau);
                }
                views.extend(augmented_views(clean.into_iter(), &cfg.augment, o.seed, AUG_UNLAB_TAG, step));
                Some(sets)
            } else {
                None
            };
            let mut ctx = Ctx::train(&store);
            let st = student_step(
                &model,
                &mut ctx,
                &views,
                &labels,
                pseudo.as_deref().map(|p| (p, tau)),
                &Modality::ALL,
                &cfg.loss,
            )?;
            let lr = lr_schedule(step, &sched);
            let (lv, grads) = backward(&mut ctx, st.loss)?;
            if st.ctc_skipped > 0 {
                metrics.log(epoch, step, "train", None, "ctc_infeasible_rows", st.ctc_skipped as f64)?;
            }
            log_modality_losses(&mut metrics, &ctx.g, epoch, step, "train", &st.labelled)?;
            if let Some(un) = &st.unlabelled {
                log_modality_losses(&mut metrics, &ctx.g, epoch, step, "unlabelled", un)?;
            }
            drop(ctx);
            metrics.log(epoch, step, "train", None, "loss", lv)?;
            if let Some(norm) = update(&mut opt, &mut store, grads, lr, &mut stats) {
                metrics.log(epoch, step, "train", None, "grad_norm", norm)?;
            }
            let mu = momentum_schedule(step, sched.total_steps, cfg.ema_mu0);
            ema_update(&mut teacher, &store, mu)?;
            epoch_loss += lv;
            stats.steps += 1;
        }
        let s = stats.steps;
        metrics.log(epoch, s, "train", None, "epoch_loss", epoch_loss / spe as f64)?;
        if let Some(k) = kept.kept_fraction_ctc() {
            metrics.log(epoch, s, "unlabelled", None, "kept_fraction_ctc", k)?;
        }
        if let Some(k) = kept.kept_fraction_attn() {
            metrics.log(epoch, s, "unlabelled", None, "kept_fraction_attention", k)?;
        }
        if let Some(c) = kept.mean_conf_attn() {
            metrics.log(epoch, s, "unlabelled", None, "mean_confidence_attention", c)?;
        }
        info!(
            "semi epoch {epoch}: loss {:.4}, kept {:?}",
            epoch_loss / spe as f64,
            kept.kept_fraction_attn()
        );
        if cfg.validate_every > 0 && (epoch + 1) % cfg.validate_every == 0 {
            let st = [(Modality::ALL.to_vec(), store.clone())];
            log_validation(&mut metrics, &model, &st, &corpus.eval, epoch, s)?;
        }
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
