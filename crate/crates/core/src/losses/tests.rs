use super::*;
use crate::autodiff::gradcheck::check;
use crate::autodiff::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_logp<R: Rng>(rng: &mut R, t: usize, v: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(t * v);
    for _ in 0..t {
        let logits: Vec<f64> = (0..v).map(|_| rng.random_range(-3.0..3.0)).collect();
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln() + m;
        out.extend(logits.iter().map(|x| x - z));
    }
    out
}

fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != blank {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Sums the probability of every one of the V^T frame paths that collapses
/// to `labels`.
fn brute_force_ctc(logp: &[f64], t: usize, v: usize, labels: &[usize], blank: usize) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % v;
            c /= v;
        }
        if collapse(&path, blank) == labels {
            total += path.iter().enumerate().map(|(i, &k)| logp[i * v + k]).sum::<f64>().exp();
        }
    }
    -total.ln()
}

#[test]
fn ctc_single_alignment() {
    let logp = [0.5f64.ln(), 0.5f64.ln()];
    let r = ctc_loss(&logp, 1, 2, &[0], 1).unwrap();
    assert!((r.loss - 0.693147).abs() < 1e-6);
}

#[test]
fn ctc_empty_labels_is_all_blank_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logp = random_logp(&mut rng, 5, 3);
    let want: f64 = -(0..5).map(|t| logp[t * 3 + 2]).sum::<f64>();
    let r = ctc_loss(&logp, 5, 3, &[], 2).unwrap();
    assert!((r.loss - want).abs() < 1e-12);
}

#[test]
fn ctc_infeasible_is_flagged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let logp = random_logp(&mut rng, 2, 3);
    assert!(ctc_loss(&logp, 2, 3, &[0, 0], 2).is_none());
    assert!(ctc_loss(&logp, 2, 3, &[0, 1, 0], 2).is_none());
    assert!(ctc_loss(&logp, 2, 3, &[0, 1], 2).is_some());
    assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
}

#[test]
fn ctc_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    while checked < 1000 {
        let v = rng.random_range(2..=4);
        let t = rng.random_range(1..=6);
        let u = rng.random_range(0..=3);
        let blank = v - 1;
        let labels: Vec<usize> = (0..u).map(|_| rng.random_range(0..v - 1)).collect();
        let logp = random_logp(&mut rng, t, v);
        let Some(r) = ctc_loss(&logp, t, v, &labels, blank) else {
            assert!(t < min_frames(&labels));
            continue;
        };
        let want = brute_force_ctc(&logp, t, v, &labels, blank);
        assert!((r.loss - want).abs() < 1e-9, "{labels:?} T={t}: {} vs {want}", r.loss);
        checked += 1;
    }
}

#[test]
fn ctc_gradient_through_log_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..20 {
        let (rows, t, v) = (2, rng.random_range(3..=6), rng.random_range(3..=5));
        let logits: Vec<f64> = (0..rows * t * v).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<Vec<usize>> = (0..rows)
            .map(|_| (0..rng.random_range(0..=2)).map(|_| rng.random_range(0..v - 1)).collect())
            .collect();
        let lens = vec![t, t - 1];
        let x = Tensor::from_f64(&[rows, t, v], &logits).unwrap();
        let res = check(
            &[x],
            |g, xs| {
                let lp = g.log_softmax(xs[0], 2)?;
                Ok(ctc_batch_loss(g, lp, &lens, &labels, v - 1, 0.5)?.0)
            },
            1e-6,
        )
        .unwrap();
        assert!(res.max_rel_err < 1e-4, "case {case}: {res:?}");
    }
}

#[test]
fn ctc_batch_skips_infeasible_rows() {
    let mut g = Graph::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lp = random_logp(&mut rng, 6, 3);
    let x = g.param(Tensor::from_f64(&[2, 3, 3], &lp).unwrap());
    let (loss, skipped) = ctc_batch_loss(&mut g, x, &[3, 1], &[vec![0], vec![0, 1]], 2, 1.0).unwrap();
    assert_eq!(skipped, 1);
    let want = ctc_loss(&lp[..9], 3, 3, &[0], 2).unwrap().loss;
    assert!((g.value(loss).item() - want).abs() < 1e-12);
    g.backward(loss).unwrap();
    let gr = g.grad(x).unwrap();
    assert!(gr.data()[9..].iter().all(|&x| x == 0.0));
    assert!(ctc_batch_loss(&mut g, x, &[3, 3], &[vec![2], vec![]], 2, 1.0).is_err());
}

fn uniform_logits(g: &mut Graph<f64>, rows: usize, l: usize, v: usize) -> Var {
    g.param(Tensor::zeros(&[rows, l, v]))
}

#[test]
fn attention_ce_cases() {
    let mut g = Graph::<f64>::new();
    let x = uniform_logits(&mut g, 1, 3, 4);
    let loss = attention_ce_loss(&mut g, x, &[vec![0, 1, 3]], 1.0).unwrap();
    assert!((g.value(loss).item() - 3.0 * 4f64.ln()).abs() < 1e-12);
    assert!((g.value(loss).item() - 4.158883).abs() < 1e-6);

    let mut logits = vec![0.0; 8];
    logits[1] = 1e3;
    logits[4 + 2] = 1e3;
    let y = g.constant(Tensor::from_f64(&[1, 2, 4], &logits).unwrap());
    let loss = attention_ce_loss(&mut g, y, &[vec![1, 2]], 1.0).unwrap();
    assert!(g.value(loss).item().abs() < 1e-12);

    let z = uniform_logits(&mut g, 1, 2, 4);
    assert!(attention_ce_loss(&mut g, z, &[vec![0, 1, 2]], 1.0).is_err());
}

#[test]
fn attention_ce_matches_direct_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let (rows, l, v) = (3, 4, 6);
        let logits: Vec<f64> = (0..rows * l * v).map(|_| rng.random_range(-4.0..4.0)).collect();
        let targets: Vec<Vec<usize>> = (0..rows)
            .map(|_| (0..rng.random_range(1..=l)).map(|_| rng.random_range(0..v)).collect())
            .collect();
        let mut want = 0.0;
        for (r, t) in targets.iter().enumerate() {
            for (j, &k) in t.iter().enumerate() {
                let row = &logits[(r * l + j) * v..(r * l + j + 1) * v];
                let z: f64 = row.iter().map(|x| x.exp()).sum();
                want -= (row[k].exp() / z).ln();
            }
        }
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::from_f64(&[rows, l, v], &logits).unwrap());
        let loss = attention_ce_loss(&mut g, x, &targets, 1.0 / rows as f64).unwrap();
        assert!((g.value(loss).item() - want / rows as f64).abs() < 1e-9);
    }
}

fn scalar(g: &mut Graph<f64>, x: f64) -> Var {
    g.param(Tensor::scalar(x))
}

fn modality_losses(g: &mut Graph<f64>, vals: [f64; 3], w: &LossWeights) -> PerModalityLosses {
    let mut p = PerModalityLosses::default();
    for (m, v) in Modality::ALL.into_iter().zip(vals) {
        let c = scalar(g, v);
        let a = scalar(g, v);
        p.insert(m, combine_modality(g, c, a, w).unwrap());
    }
    p
}

#[test]
fn combine_modality_cases() {
    let mut g = Graph::<f64>::new();
    let (c, a) = (scalar(&mut g, 2.0), scalar(&mut g, 1.0));
    let w = LossWeights::default();
    let l = combine_modality(&mut g, c, a, &w).unwrap();
    assert!((g.value(l.combined).item() - 1.1).abs() < 1e-12);
    for (lambda, want) in [(1.0, 2.0), (0.0, 1.0)] {
        let w = LossWeights {
            lambda_ctc: lambda,
            ..Default::default()
        };
        let l = combine_modality(&mut g, c, a, &w).unwrap();
        assert_eq!(g.value(l.combined).item(), want);
    }
}

#[test]
fn supervised_loss_cases() {
    let mut g = Graph::<f64>::new();
    let w = LossWeights::default();
    let p = modality_losses(&mut g, [1.0, 1.0, 1.0], &w);
    let l = supervised_loss(&mut g, &p, &w).unwrap();
    assert!((g.value(l).item() - 1.7).abs() < 1e-12);
    let p = modality_losses(&mut g, [2.0, 3.0, 5.0], &w);
    for (lv, want) in [(1.0, 2.0), (0.0, 8.0)] {
        let w = LossWeights {
            lambda_v: lv,
            ..Default::default()
        };
        let l = supervised_loss(&mut g, &p, &w).unwrap();
        assert!((g.value(l).item() - want).abs() < 1e-12);
    }
    let mut partial = p.clone();
    partial.0.pop();
    assert!(supervised_loss(&mut g, &partial, &w).is_err());
}

#[test]
fn semi_loss_cases() {
    let mut g = Graph::<f64>::new();
    let w = LossWeights::default();
    let lab = modality_losses(&mut g, [1.0, 1.0, 1.0], &w);
    let unl = modality_losses(&mut g, [1.0, 1.0, 1.0], &w);
    let l = semi_loss(&mut g, &lab, &unl, &w).unwrap();
    assert!((g.value(l).item() - 1.7).abs() < 1e-12);

    let lab = modality_losses(&mut g, [0.7, 1.3, 2.9], &w);
    let unl = modality_losses(&mut g, [5.0, 6.0, 7.0], &w);
    let w1 = LossWeights {
        gamma_a: 1.0,
        gamma_v: 1.0,
        ..Default::default()
    };
    let semi = semi_loss(&mut g, &lab, &unl, &w1).unwrap();
    let sup = supervised_loss(&mut g, &lab, &w1).unwrap();
    assert_eq!(g.value(semi).item(), g.value(sup).item());
}

#[test]
fn semi_loss_coefficients_by_differentiation() {
    let w = LossWeights {
        lambda_v: 0.37,
        gamma_a: 0.61,
        gamma_v: 0.23,
        ..Default::default()
    };
    let mut g = Graph::<f64>::new();
    let lab = modality_losses(&mut g, [1.0, 2.0, 3.0], &w);
    let unl = modality_losses(&mut g, [4.0, 5.0, 6.0], &w);
    let l = semi_loss(&mut g, &lab, &unl, &w).unwrap();
    g.backward(l).unwrap();
    for m in Modality::ALL {
        let (cl, cu) = w.semi_coefs(m);
        for (set, coef) in [(&lab, cl), (&unl, cu)] {
            let ml = set.get(m).unwrap();
            let dc = g.grad(ml.ctc).unwrap().item();
            let da = g.grad(ml.attention).unwrap().item();
            assert!((dc - coef * w.lambda_ctc).abs() < 1e-15);
            assert!((da - coef * (1.0 - w.lambda_ctc)).abs() < 1e-15);
        }
    }
    let want = [
        (Modality::V, 0.23 * 0.37, 0.77 * 0.37),
        (Modality::A, 0.61 * 0.63, 0.39 * 0.63),
        (Modality::Av, 0.61 * 0.63, 0.39 * 0.63),
    ];
    for (m, a, b) in want {
        let (x, y) = w.semi_coefs(m);
        assert!((x - a).abs() < 1e-15 && (y - b).abs() < 1e-15);
    }
}

#[test]
fn unlabelled_ctc_cases() {
    // 3 frames, vocab 3, hand-computed
    let probs = [[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.25, 0.25, 0.5]];
    let logp: Vec<f64> = probs.iter().flatten().map(|p: &f64| p.ln()).collect();
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[1, 3, 3], &logp).unwrap());
    let frames = vec![vec![0, 1, 2]];
    let zero = unlabelled_ctc_loss(&mut g, x, &[3], &frames, &[vec![false; 3]], 1).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);
    let mask = vec![vec![true, false, true]];
    let l = unlabelled_ctc_loss(&mut g, x, &[3], &frames, &mask, 1).unwrap();
    let want = -(0.7f64.ln() + 0.5f64.ln()) / 2.0;
    assert!((g.value(l).item() - want).abs() < 1e-12);
    // student equals teacher: mean of −log max prob over kept frames
    let all = vec![vec![true; 3]];
    let l = unlabelled_ctc_loss(&mut g, x, &[3], &frames, &all, 1).unwrap();
    let want = -(0.7f64.ln() + 0.6f64.ln() + 0.5f64.ln()) / 3.0;
    assert!((g.value(l).item() - want).abs() < 1e-12);
    assert!(unlabelled_ctc_loss(&mut g, x, &[3], &[vec![0, 1]], &[vec![true; 2]], 1).is_err());
}

#[test]
fn unlabelled_attention_cases() {
    let logits = [1.0, 2.0, 0.5, 0.0, 0.3, -1.0];
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[1, 2, 3], &logits).unwrap());
    let targets = vec![vec![1, 0]];
    let l = unlabelled_attention_loss(&mut g, x, &targets, &[vec![false, false]], 1).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let l = unlabelled_attention_loss(&mut g, x, &targets, &[vec![true, true]], 1).unwrap();
    let ce = |row: &[f64], k: usize| {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        -(row[k].exp() / z).ln()
    };
    let hand = (ce(&logits[..3], 1) + ce(&logits[3..], 0)) / 2.0;
    assert!((g.value(l).item() - hand).abs() < 1e-9);
    let full = attention_ce_loss(&mut g, x, &targets, 0.5).unwrap();
    assert!((g.value(l).item() - g.value(full).item()).abs() < 1e-12);
    let l = unlabelled_attention_loss(&mut g, x, &targets, &[vec![false, true]], 1).unwrap();
    assert!((g.value(l).item() - ce(&logits[3..], 0)).abs() < 1e-9);
}

#[test]
fn filtered_and_padded_positions_get_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let lp = random_logp(&mut rng, 8, 3);
    let mut g = Graph::<f64>::new();
    let x = g.param(Tensor::from_f64(&[2, 4, 3], &lp).unwrap());
    let frames = vec![vec![0, 1, 2, 0], vec![1, 1]];
    let masks = vec![vec![true, false, true, false], vec![false, true]];
    let l = unlabelled_ctc_loss(&mut g, x, &[4, 2], &frames, &masks, 2).unwrap();
    g.backward(l).unwrap();
    let gr = g.grad(x).unwrap();
    let zero_frames = [1, 3, 4, 6, 7];
    for f in zero_frames {
        assert!(gr.data()[f * 3..(f + 1) * 3].iter().all(|&v| v == 0.0), "frame {f}");
    }
    assert!(gr.data()[0] != 0.0 && gr.data()[5 * 3 + 1] != 0.0);
}

#[test]
fn weights_validation() {
    assert!(LossWeights::default().validate().is_ok());
    let bad = LossWeights {
        tau: 1.5,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}

proptest! {
    #[test]
    fn ctc_is_non_negative(seed in 0u64..10_000, t in 1usize..8, u in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..u).map(|_| rng.random_range(0..3)).collect();
        let logp = random_logp(&mut rng, t, 4);
        if let Some(r) = ctc_loss(&logp, t, 4, &labels, 3) {
            prop_assert!(r.loss >= -1e-12);
            // each frame's posterior occupancy sums to one
            for f in 0..t {
                let s: f64 = r.grad[f * 4..(f + 1) * 4].iter().sum();
                prop_assert!((s + 1.0).abs() < 1e-9);
            }
        }
    }
}
