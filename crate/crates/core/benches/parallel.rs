use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use usr_core::data::{generate_corpus, CorpusConfig};
use usr_core::decode::{evaluate, EvalConfig};
use usr_core::exec::Exec;
use usr_core::model::{Modality, Model, ModelConfig};
use usr_core::train::{sweep_seeds, train_supervised, Metrics, OptimConfig, TrainConfig};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn corpus_generation(c: &mut Criterion) {
    let cfg = CorpusConfig::default();
    let mut g = c.benchmark_group("generate_corpus");
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_corpus(black_box(&cfg), 400, 0.5, exec).unwrap())
        });
    }
    g.finish();
}

fn evaluation(c: &mut Criterion) {
    let cc = CorpusConfig {
        eval_utterances: 32,
        ..Default::default()
    };
    let corpus = generate_corpus(&cc, 8, 1.0, Exec::Sequential).unwrap();
    let mc = ModelConfig::preset("tiny", cc.vocab(), cc.video_dim, cc.audio_dim, cc.audio_rate_ratio).unwrap();
    let (model, store) = Model::new(&mc, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let ec = EvalConfig::default();
    let mut g = c.benchmark_group("evaluate_av");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| evaluate(&model, &store, &corpus.eval, Modality::Av, &ec, exec).unwrap())
        });
    }
    g.finish();
}

fn seed_sweep(c: &mut Criterion) {
    let cc = CorpusConfig {
        eval_utterances: 8,
        ..Default::default()
    };
    let corpus = generate_corpus(&cc, 32, 1.0, Exec::Sequential).unwrap();
    let cfg = TrainConfig {
        preset: "tiny".into(),
        optim: OptimConfig {
            total_epochs: 1,
            warmup_epochs: 1,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut g = c.benchmark_group("supervised_sweep_3_seeds");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                sweep_seeds(&[42, 43, 44], exec, |seed| {
                    let mut c = cfg.clone();
                    c.optim.seed = seed;
                    train_supervised(&corpus, &c, Metrics::in_memory("supervised")).unwrap().stats.steps
                })
            })
        });
    }
    g.finish();
}

criterion_group!(benches, corpus_generation, evaluation, seed_sweep);
criterion_main!(benches);
