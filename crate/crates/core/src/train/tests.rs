use super::*;
use crate::data::{generate_corpus, Corpus};

fn corpus(n: usize, labelled_fraction: f64) -> Corpus {
    let cc = CorpusConfig {
        eval_utterances: 4,
        ..CorpusConfig::default()
    };
    generate_corpus(&cc, n, labelled_fraction, Exec::Sequential).unwrap()
}

fn quick() -> TrainConfig {
    TrainConfig {
        preset: "tiny".into(),
        optim: OptimConfig {
            total_epochs: 2,
            warmup_epochs: 1,
            batch_labelled: 8,
            batch_unlabelled: 8,
            ..OptimConfig::default()
        },
        validate_every: 1,
        ..TrainConfig::default()
    }
}

fn losses(m: &Metrics) -> Vec<f64> {
    m.series("train", None, "loss").into_iter().map(|r| r.2).collect()
}

#[test]
fn epoch_batches_partition_and_respect_cap() {
    let frames: Vec<usize> = (0..23).map(|i| 5 + i % 7).collect();
    let b = epoch_batches(&frames, 1, 1, 0, 5, 0);
    assert_eq!(b.len(), 5);
    let mut all: Vec<usize> = b.concat();
    all.sort();
    assert_eq!(all, (0..23).collect::<Vec<_>>());
    assert_ne!(b, epoch_batches(&frames, 1, 1, 1, 5, 0));
    assert_eq!(b, epoch_batches(&frames, 1, 1, 0, 5, 0));
    for batch in epoch_batches(&frames, 1, 1, 0, 5, 20) {
        assert!(!batch.is_empty());
        assert!(batch.len() == 1 || batch.iter().map(|&i| frames[i]).sum::<usize>() <= 20);
    }
}

#[test]
fn tricks_set_learning_rate_scales() {
    let cc = CorpusConfig::default();
    let cfg = quick();
    let mc = cfg.model_config(&cc).unwrap();
    let (model, store) = fresh_model(&mc, 0).unwrap();
    assert!(lr_scales(&model, &store, &FineTuneTricks::default()).iter().all(|&s| s == 1.0));
    let t = FineTuneTricks {
        freeze_encoder_blocks: 1,
        layer_lr_decay: 0.5,
    };
    let s = lr_scales(&model, &store, &t);
    for ((_, p), &x) in store.iter().zip(&s) {
        let n = p.name.as_str();
        if n.starts_with("video.") || n.starts_with("encoder.0.") || n == "mask_token" {
            assert_eq!(x, 0.0, "{n}");
        } else if n.starts_with("encoder.1.") {
            assert_eq!(x, 0.5, "{n}");
        } else if n.starts_with("decoder.") {
            assert_eq!(x, 1.0, "{n}");
        }
    }
}

#[test]
fn supervised_runs_are_deterministic_and_learn() {
    let c = corpus(24, 1.0);
    let a = train_supervised(&c, &quick(), Metrics::in_memory("supervised")).unwrap();
    let b = train_supervised(&c, &quick(), Metrics::in_memory("supervised")).unwrap();
    assert_eq!(a.metrics.records, b.metrics.records);
    assert_eq!(a.stats.steps, 6);
    let ep = a.metrics.series("train", None, "epoch_loss");
    assert!(ep[1].2 < ep[0].2, "{ep:?}");
    assert_eq!(a.metrics.series("val", Some("v"), "attention_accuracy").len(), 2);
}

#[test]
fn unshared_mode_trains_one_model_per_modality() {
    let c = corpus(16, 1.0);
    let cfg = TrainConfig {
        shared: false,
        validate_every: 0,
        ..quick()
    };
    let out = train_supervised(&c, &cfg, Metrics::in_memory("supervised")).unwrap();
    assert_eq!(out.students.len(), 3);
    assert_eq!(out.stats.steps, 3 * 4);
    for m in Modality::ALL {
        assert_eq!(out.metrics.series("train", Some(m.name()), "loss").len(), 4);
    }
    assert!(!std::ptr::eq(out.store_for(Modality::V), out.store_for(Modality::A)));
}

#[test]
fn semi_with_unit_gammas_reproduces_supervised_trace() {
    // equal labelled and unlabelled batch counts keep the step plan aligned
    let c = corpus(32, 0.5);
    let mut cfg = quick();
    cfg.validate_every = 0;
    cfg.loss.gamma_a = 1.0;
    cfg.loss.gamma_v = 1.0;
    let sup = train_supervised(&c, &cfg, Metrics::in_memory("supervised")).unwrap();
    let semi = train_semi(&c, &cfg, None, Metrics::in_memory("semi")).unwrap();
    let (a, b) = (losses(&sup.metrics), losses(&semi.metrics));
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
    }
    assert_eq!(semi.stats.teacher_rows, vec![8; semi.stats.steps]);
}

#[test]
fn semi_without_unlabelled_falls_back() {
    let c = corpus(16, 1.0);
    let mut cfg = quick();
    cfg.validate_every = 0;
    let sup = train_supervised(&c, &cfg, Metrics::in_memory("supervised")).unwrap();
    let semi = train_semi(&c, &cfg, None, Metrics::in_memory("semi")).unwrap();
    assert_eq!(losses(&sup.metrics), losses(&semi.metrics));
    assert!(semi.stats.teacher_rows.is_empty());
}

fn param_unchanged(a: &ParamStore<f32>, b: &ParamStore<f32>, prefix: &str) -> bool {
    a.iter()
        .zip(b.iter())
        .filter(|((_, p), _)| p.name.starts_with(prefix))
        .all(|((_, p), (_, q))| p.value == q.value)
}

#[test]
fn extreme_ctc_weights_train_a_single_head() {
    let c = corpus(16, 1.0);
    let mut cfg = quick();
    cfg.validate_every = 0;
    cfg.optim.weight_decay = 0.0;
    let (_, init) = fresh_model(&cfg.model_config(&c.config).unwrap(), cfg.optim.seed).unwrap();
    for (lambda, frozen, trained) in [(1.0, "decoder.", "ctc."), (0.0, "ctc.", "decoder.")] {
        cfg.loss.lambda_ctc = lambda;
        let out = train_supervised(&c, &cfg, Metrics::in_memory("supervised")).unwrap();
        let s = out.store_for(Modality::V);
        assert!(param_unchanged(s, &init, frozen), "lambda_ctc {lambda}");
        assert!(!param_unchanged(s, &init, trained), "lambda_ctc {lambda}");
        // logged loss equals the single-loss aggregate
        let which = if lambda == 1.0 { "ctc_loss" } else { "attention_loss" };
        let total = losses(&out.metrics);
        for (step, &l) in total.iter().enumerate() {
            let part = |m: Modality| {
                out.metrics
                    .records
                    .iter()
                    .find(|r| r.step == step && r.metric == which && r.modality.as_deref() == Some(m.name()))
                    .unwrap()
                    .value
            };
            let w = &cfg.loss;
            let want = w.lambda_v * part(Modality::V) + (1.0 - w.lambda_v) * (part(Modality::A) + part(Modality::Av));
            assert!((l - want).abs() < 1e-4 * want.abs().max(1.0), "{l} vs {want}");
        }
    }
}

#[test]
fn pretrain_handoff_resets_heads_only() {
    let c = corpus(16, 0.5);
    let mut cfg = quick();
    cfg.validate_every = 0;
    let pre = run_pretrain(&c, &cfg, Metrics::in_memory("pretrain")).unwrap();
    let l = losses(&pre.metrics);
    assert_eq!(l.len(), pre.stats.steps);
    assert!(l[0].abs() < 0.3, "initial cosine loss {}", l[0]);
    let pre_store = pre.store_for(Modality::Av);
    let (_, fresh) = fresh_model(&cfg.model_config(&c.config).unwrap(), 7).unwrap();
    let init = init_from_pretrained(&fresh, pre_store).unwrap();
    for (((_, a), (_, f)), (_, p)) in init.iter().zip(fresh.iter()).zip(pre_store.iter()) {
        if a.name.starts_with("decoder.") || a.name.starts_with("ctc.") {
            assert_eq!(a.value, f.value, "{}", a.name);
        } else {
            assert_eq!(a.value, p.value, "{}", a.name);
        }
    }
    let semi = train_semi(&c, &cfg, Some(pre_store), Metrics::in_memory("semi")).unwrap();
    assert_eq!(semi.stats.teacher_rows.len(), semi.stats.steps);
}

#[test]
fn diverged_runs_are_reported() {
    let s = RunStats {
        steps: 100,
        skipped: 2,
        teacher_rows: vec![],
    };
    assert!(matches!(s.check(), Err(TrainError::Diverged { .. })));
    let s = RunStats {
        steps: 100,
        skipped: 1,
        teacher_rows: vec![],
    };
    assert!(s.check().is_ok());
}

#[test]
fn median_and_sweep() {
    assert_eq!(median(&[]), None);
    assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
    assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    let seeds = [42, 43, 44];
    let seq = sweep_seeds(&seeds, Exec::Sequential, |s| s * 2);
    assert_eq!(seq, vec![84, 86, 88]);
    assert_eq!(sweep_seeds(&seeds, Exec::Parallel, |s| s * 2), seq);
}
