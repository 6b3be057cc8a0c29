use super::*;
use crate::autodiff::Tensor;
use crate::data::Views;
use crate::losses::ctc_loss;
use crate::model::ModelConfig;
use crate::pseudo_label::{argmax_output, greedy_attention};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

fn random_logp(rng: &mut ChaCha8Rng, frames: usize, v: usize, sharp: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(frames * v);
    for _ in 0..frames {
        let z: Vec<f64> = (0..v).map(|_| sharp * rng.random_range(-1.0..1.0)).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        out.extend(z.iter().map(|x| x - lse));
    }
    out
}

/// Deterministic pseudo-random attention distribution per prefix.
struct TableScorer {
    seed: u64,
    v: usize,
    sharp: f64,
}

impl TableScorer {
    fn row(&self, prefix: &[usize]) -> Vec<f64> {
        let mut h = DefaultHasher::new();
        (self.seed, prefix).hash(&mut h);
        let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
        random_logp(&mut rng, 1, self.v, self.sharp)
    }
}

impl AttentionScorer for TableScorer {
    fn next_log_probs(&mut self, prefixes: &[&[usize]]) -> std::result::Result<Vec<Vec<f64>>, TensorError> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

fn all_sequences(content: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for c in 0..content {
                let mut t: Vec<usize> = s.clone();
                t.push(c);
                next.push(t);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// All-path CTC prefix probability: sum over alignments whose collapsed
/// output begins with `prefix`.
fn brute_prefix(logp: &[f64], frames: usize, v: usize, blank: usize, prefix: &[usize], full: bool) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        let mut out = Vec::new();
        let mut prev = None;
        for &k in &path {
            if Some(k) != prev && k != blank {
                out.push(k);
            }
            prev = Some(k);
        }
        let ok = if full { out == prefix } else { out.starts_with(prefix) };
        if ok {
            total += path.iter().enumerate().map(|(t, &k)| logp[t * v + k]).sum::<f64>().exp();
        }
        let mut i = 0;
        loop {
            if i == frames {
                return total.ln();
            }
            path[i] += 1;
            if path[i] < v {
                break;
            }
            path[i] = 0;
            i += 1;
        }
    }
}

#[test]
fn prefix_scores_match_path_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..60 {
        let frames = 1 + case % 5;
        let v = 3 + case % 2;
        let blank = v - 1;
        let logp = random_logp(&mut rng, frames, v, 2.0);
        let s = CtcPrefixScorer::new(logp.clone(), frames, v, blank);
        for seq in all_sequences(v - 1, 3) {
            let want = brute_prefix(&logp, frames, v, blank, &seq, false);
            let got = s.prefix_score(&seq);
            if seq.is_empty() {
                assert_eq!(got, 0.0);
            } else if want == f64::NEG_INFINITY {
                assert_eq!(got, f64::NEG_INFINITY, "{seq:?}");
            } else {
                assert!((got - want).abs() < 1e-9, "prefix {seq:?}: {got} vs {want}");
            }
            let want_full = brute_prefix(&logp, frames, v, blank, &seq, true);
            let got_full = s.sequence_score(&seq);
            if want_full == f64::NEG_INFINITY {
                assert_eq!(got_full, f64::NEG_INFINITY);
            } else {
                assert!((got_full - want_full).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn full_sequence_score_is_negative_ctc_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let frames = rng.random_range(1..12);
        let v = rng.random_range(2..6);
        let blank = v - 1;
        let logp = random_logp(&mut rng, frames, v, 3.0);
        let len = rng.random_range(0..6);
        let labels: Vec<usize> = (0..len).map(|_| rng.random_range(0..v - 1)).collect();
        let s = CtcPrefixScorer::new(logp.clone(), frames, v, blank);
        let got = s.sequence_score(&labels);
        match ctc_loss(&logp, frames, v, &labels, blank) {
            Some(r) => assert!((got + r.loss).abs() < 1e-9, "{got} vs {}", -r.loss),
            None => assert_eq!(got, f64::NEG_INFINITY),
        }
    }
}

proptest! {
    #[test]
    fn prefix_mass_is_conserved_and_monotone(seed in any::<u64>(), frames in 1usize..8, v in 2usize..5, len in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blank = v - 1;
        let logp = random_logp(&mut rng, frames, v, 2.0);
        let s = CtcPrefixScorer::new(logp, frames, v, blank);
        let g: Vec<usize> = (0..len).map(|_| rng.random_range(0..v - 1)).collect();
        let psi_g = s.prefix_score(&g);
        let mut st = s.initial();
        for &c in &g {
            st = s.extend(&st, c).1;
        }
        // p(starts with g) = p(= g) + Σ_c p(starts with g + c)
        let mut mass = s.final_score(&st).exp();
        for c in 0..v - 1 {
            let (p, _) = s.extend(&st, c);
            prop_assert!(p <= psi_g + 1e-12);
            mass += p.exp();
        }
        prop_assert!((mass - psi_g.exp()).abs() < 1e-9, "{} vs {}", mass, psi_g.exp());
    }
}

#[test]
fn greedy_ctc_collapses_and_drops_blanks() {
    let v = 3;
    let blank = 2;
    let one_hot = |ks: &[usize]| -> Vec<f64> {
        ks.iter()
            .flat_map(|&k| (0..v).map(move |j| if j == k { 0.0 } else { -10.0 }))
            .collect()
    };
    assert_eq!(greedy_ctc_decode(&one_hot(&[0, 0, 2, 0, 1, 1, 2]), 7, v, blank), vec![0, 0, 1]);
    assert_eq!(greedy_ctc_decode(&one_hot(&[2, 2]), 2, v, blank), Vec::<usize>::new());
    assert!(greedy_ctc_decode(&[], 0, v, blank).is_empty());
}

struct Instance {
    sc: TableScorer,
    ctc: CtcPrefixScorer,
    logp: Vec<f64>,
    frames: usize,
    vocab: Vocab,
    max_len: usize,
}

fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vocab = Vocab::new(rng.random_range(1..4));
    let frames = rng.random_range(1..7);
    let logp = random_logp(&mut rng, frames, vocab.total(), 3.0);
    Instance {
        sc: TableScorer {
            seed,
            v: vocab.total(),
            sharp: 3.0,
        },
        ctc: CtcPrefixScorer::new(logp.clone(), frames, vocab.total(), vocab.blank()),
        logp,
        frames,
        vocab,
        max_len: rng.random_range(1..5),
    }
}

/// Best sequence by enumeration, scored with the forward-algorithm CTC loss.
fn brute_best(inst: &Instance, alpha: f64) -> (Vec<usize>, f64) {
    let vocab = inst.vocab;
    let mut best = (vec![], f64::NEG_INFINITY);
    for seq in all_sequences(vocab.content, inst.max_len) {
        let mut s_att = 0.0;
        for i in 0..=seq.len() {
            let row = inst.sc.row(&seq[..i]);
            s_att += if i < seq.len() { row[seq[i]] } else { row[vocab.eos()] };
        }
        let s_ctc = match ctc_loss(&inst.logp, inst.frames, vocab.total(), &seq, vocab.blank()) {
            Some(r) => -r.loss,
            None => f64::NEG_INFINITY,
        };
        let score = if alpha == 0.0 { s_att } else { alpha * s_ctc + (1.0 - alpha) * s_att };
        if score > best.1 {
            best = (seq, score);
        }
    }
    best
}

#[test]
fn exhaustive_beam_equals_brute_force() {
    for seed in 0..200 {
        let mut inst = instance(seed);
        for alpha in [0.0, 0.1, 0.5, 1.0] {
            let cfg = DecodeConfig {
                alpha,
                beam_size: 1000,
                ..Default::default()
            };
            let res = hybrid_beam_search(&mut inst.sc, &inst.ctc, inst.vocab, &cfg, inst.max_len).unwrap();
            let (want, score) = brute_best(&inst, alpha);
            assert!(res.finished);
            if score == f64::NEG_INFINITY {
                assert_eq!(res.best.combined, f64::NEG_INFINITY);
                continue;
            }
            assert!(
                (res.best.combined - score).abs() < 1e-9,
                "seed {seed} alpha {alpha}: {:?} {} vs {want:?} {score}",
                res.best.tokens,
                res.best.combined
            );
            assert_eq!(res.best.tokens, want, "seed {seed} alpha {alpha}");
        }
    }
}

#[test]
fn combined_score_is_recomputable_from_parts() {
    for seed in 0..50 {
        let Instance { mut sc, ctc, vocab, max_len, .. } = instance(seed);
        let cfg = DecodeConfig {
            alpha: 0.3,
            beam_size: 3,
            ..Default::default()
        };
        let h = hybrid_beam_search(&mut sc, &ctc, vocab, &cfg, max_len).unwrap().best;
        if h.combined.is_finite() {
            assert!((h.combined - (0.3 * h.s_ctc + 0.7 * h.s_att)).abs() < 1e-12);
            assert!((h.s_ctc - ctc.sequence_score(&h.tokens)).abs() < 1e-12);
        }
    }
}

#[test]
fn wider_beams_never_beat_exhaustive_search() {
    for seed in 0..100 {
        let Instance { mut sc, ctc, vocab, max_len, .. } = instance(seed);
        let run = |sc: &mut TableScorer, beam| {
            let cfg = DecodeConfig {
                alpha: 0.3,
                beam_size: beam,
                ..Default::default()
            };
            hybrid_beam_search(sc, &ctc, vocab, &cfg, max_len).unwrap().best.combined
        };
        let full = run(&mut sc, 1000);
        for beam in [1, 2, 3, 5] {
            assert!(run(&mut sc, beam) <= full);
        }
    }
}

#[test]
fn beam_one_without_ctc_is_greedy() {
    for seed in 0..100 {
        let Instance { mut sc, ctc, vocab, .. } = instance(seed);
        let max_len = 6;
        let cfg = DecodeConfig {
            alpha: 0.0,
            beam_size: 1,
            ..Default::default()
        };
        let res = hybrid_beam_search(&mut sc, &ctc, vocab, &cfg, max_len).unwrap();
        let mut greedy = Vec::new();
        loop {
            let (k, _) = argmax_output(&sc.row(&greedy), vocab);
            if k == vocab.eos() || greedy.len() == max_len {
                break;
            }
            greedy.push(k);
        }
        assert_eq!(res.best.tokens, greedy, "seed {seed}");
    }
}

#[test]
fn search_stops_once_finished_dominates() {
    // A scorer that strongly prefers eos finishes after the first step.
    struct EosFirst(Vocab, usize);
    impl AttentionScorer for EosFirst {
        fn next_log_probs(&mut self, p: &[&[usize]]) -> std::result::Result<Vec<Vec<f64>>, TensorError> {
            self.1 += 1;
            Ok(p.iter()
                .map(|_| {
                    let mut r = vec![(1e-6f64).ln(); self.0.total()];
                    r[self.0.eos()] = (1.0 - 1e-6 * (self.0.total() - 1) as f64).ln();
                    r
                })
                .collect())
        }
    }
    let vocab = Vocab::new(3);
    let ctc = CtcPrefixScorer::new(vec![0.0; 0], 0, vocab.total(), vocab.blank());
    let cfg = DecodeConfig {
        alpha: 0.0,
        beam_size: 4,
        ..Default::default()
    };
    let mut sc = EosFirst(vocab, 0);
    let res = hybrid_beam_search(&mut sc, &ctc, vocab, &cfg, 50).unwrap();
    assert!(res.best.tokens.is_empty() && res.finished);
    assert_eq!(sc.1, 1);
}

#[test]
fn wer_cases() {
    assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 3]), 0);
    assert_eq!(edit_distance(&[1, 2, 3], &[1, 5, 3]), 1);
    assert_eq!(edit_distance(&[1, 2, 3], &[1, 3]), 1);
    assert_eq!(edit_distance(&[1, 2, 3], &[1, 2, 4, 3]), 1);
    assert_eq!(edit_distance::<u8>(&[], &[1, 2]), 2);
    assert_eq!(edit_distance(&[1, 2], &[]), 2);
    assert_eq!(wer(&[1, 2, 3, 4], &[1, 2]), Some(0.5));
    assert_eq!(wer::<usize>(&[], &[1]), None);
    assert_eq!(wer(&[1], &[2, 3, 4]), Some(3.0));
    assert_eq!(corpus_wer(3, 12), 0.25);
    assert_eq!(corpus_wer(0, 0), 0.0);
}

proptest! {
    #[test]
    fn edit_distance_is_a_metric(a in prop::collection::vec(0u8..4, 0..8), b in prop::collection::vec(0u8..4, 0..8), c in prop::collection::vec(0u8..4, 0..8)) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y);
        prop_assert_eq!(d(&a, &b), d(&b, &a));
        prop_assert_eq!(d(&a, &a), 0);
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
        prop_assert!(d(&a, &b) <= a.len().max(b.len()));
        prop_assert!(d(&a, &b) >= a.len().abs_diff(b.len()));
    }
}

fn tiny_model(seed: u64) -> (Model, ParamStore<f32>) {
    let cfg = ModelConfig {
        preset: "test".into(),
        encoder_blocks: 1,
        decoder_blocks: 1,
        attn_dim: 8,
        attn_heads: 2,
        mlp_dim: 8,
        predictor_blocks: 1,
        predictor_dim: 8,
        extractor_dim: 4,
        vocab_total: Vocab::new(3).total(),
        video_dim: 3,
        audio_dim: 2,
        audio_rate_ratio: 2,
    };
    Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn samples(n: usize, seed: u64) -> Vec<LabelledSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = rng.random_range(2..6);
            LabelledSample {
                id: i as u64,
                views: Views {
                    video: Tensor::new(&[t, 3], (0..t * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
                    audio: Tensor::new(&[2 * t, 2], (0..t * 4).map(|_| rng.random_range(-1.0..1.0)).collect())
                        .unwrap(),
                },
                labels: (0..rng.random_range(0..3)).map(|_| rng.random_range(0..3)).collect(),
            }
        })
        .collect()
}

#[test]
fn model_beam_one_matches_greedy_attention() {
    let (model, store) = tiny_model(9);
    for s in samples(6, 1) {
        let cfg = DecodeConfig {
            alpha: 0.0,
            beam_size: 1,
            max_len_factor: 3.0,
            ..Default::default()
        };
        let res = decode_views(&model, &store, &s.views, Modality::Av, &cfg).unwrap();
        let batch: InputBatch<f32> = InputBatch::from_views(&[&s.views]).unwrap();
        let mut ctx = Ctx::frozen(&store);
        let x = model.embed(&mut ctx, &batch, &[Modality::Av], None).unwrap();
        let enc = model.encode(&mut ctx, x, &batch.lens).unwrap().last;
        let cap = cfg.max_len(batch.lens[0]) + 1;
        let mut g = greedy_attention(&model, &mut ctx, enc, &batch.lens, &[cap]).unwrap().remove(0).0;
        if g.last() == Some(&model.config.vocab().eos()) {
            g.pop();
        }
        assert_eq!(res.best.tokens, g);
    }
}

#[test]
fn evaluate_is_mode_independent_and_reports() {
    let (model, store) = tiny_model(4);
    let data = samples(7, 2);
    let cfg = EvalConfig {
        decode: DecodeConfig {
            beam_size: 3,
            ..Default::default()
        },
        snr_db: Some(0.0),
        noise_seed: 11,
    };
    let a = evaluate(&model, &store, &data, Modality::A, &cfg, Exec::Sequential).unwrap();
    let b = evaluate(&model, &store, &data, Modality::A, &cfg, Exec::Parallel).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.summary.utterances, 7);
    let refs: usize = data.iter().map(|s| s.labels.len()).sum();
    assert_eq!(a.summary.ref_tokens, refs);
    let mut buf = Vec::new();
    write_reports(&mut buf, std::slice::from_ref(&a)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 8);
    assert_eq!(lines[0]["modality"], "a");
    assert_eq!(lines[7]["summary"], true);
    assert_eq!(lines[7]["edits"], a.summary.edits);
    for (u, s) in lines.iter().zip(&data) {
        if s.labels.is_empty() {
            assert!(u["wer"].is_null());
        }
    }
}

#[test]
fn bad_config_rejected() {
    let Instance { mut sc, ctc, vocab, .. } = instance(0);
    for cfg in [
        DecodeConfig {
            alpha: 1.5,
            ..Default::default()
        },
        DecodeConfig {
            beam_size: 0,
            ..Default::default()
        },
    ] {
        assert!(hybrid_beam_search(&mut sc, &ctc, vocab, &cfg, 3).is_err());
    }
}
