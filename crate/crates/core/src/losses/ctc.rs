//! CTC negative log-likelihood by the forward-backward recursion over the
//! blank-interleaved label sequence, in log space and double precision.

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

/// Minimum number of frames needed to emit `labels`: one per label plus one
/// blank between each pair of equal neighbours.
pub fn min_frames(labels: &[usize]) -> usize {
    labels.len() + labels.windows(2).filter(|w| w[0] == w[1]).count()
}

/// Result of one CTC evaluation: the loss `−log p(labels | x)` and its
/// gradient with respect to the `[T, V]` log-probabilities.
#[derive(Clone, Debug)]
pub struct CtcResult {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// CTC loss of `labels` under frame log-probabilities `logp[T, V]`.
/// Returns `None` when no alignment exists.
pub fn ctc_loss(logp: &[f64], frames: usize, vocab: usize, labels: &[usize], blank: usize) -> Option<CtcResult> {
    assert_eq!(logp.len(), frames * vocab, "logp must be [T, V]");
    assert!(labels.iter().all(|&l| l != blank && l < vocab), "labels must be non-blank ids");
    if frames < min_frames(labels) {
        return None;
    }
    if frames == 0 {
        return Some(CtcResult {
            loss: 0.0,
            grad: Vec::new(),
        });
    }
    let ext: Vec<usize> = std::iter::once(blank)
        .chain(labels.iter().flat_map(|&l| [l, blank]))
        .collect();
    let s = ext.len();
    let lp = |t: usize, k: usize| logp[t * vocab + k];
    let skip = |i: usize| i >= 2 && ext[i] != blank && ext[i] != ext[i - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s];
    alpha[0] = lp(0, ext[0]);
    if s > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for i in 0..s {
            let prev = &alpha[(t - 1) * s..t * s];
            let a = prev[i];
            let b = if i >= 1 { prev[i - 1] } else { ninf };
            let c = if skip(i) { prev[i - 2] } else { ninf };
            let v = lse3(a, b, c);
            alpha[t * s + i] = if v == ninf { ninf } else { v + lp(t, ext[i]) };
        }
    }
    let last = (frames - 1) * s;
    let log_p = if s > 1 {
        lse2(alpha[last + s - 1], alpha[last + s - 2])
    } else {
        alpha[last]
    };
    if log_p == ninf {
        return None;
    }

    let mut beta = vec![ninf; frames * s];
    beta[last + s - 1] = lp(frames - 1, ext[s - 1]);
    if s > 1 {
        beta[last + s - 2] = lp(frames - 1, ext[s - 2]);
    }
    for t in (0..frames - 1).rev() {
        for i in 0..s {
            let next = &beta[(t + 1) * s..(t + 2) * s];
            let a = next[i];
            let b = if i + 1 < s { next[i + 1] } else { ninf };
            let c = if i + 2 < s && skip(i + 2) { next[i + 2] } else { ninf };
            let v = lse3(a, b, c);
            beta[t * s + i] = if v == ninf { ninf } else { v + lp(t, ext[i]) };
        }
    }

    let mut grad = vec![0.0; frames * vocab];
    for t in 0..frames {
        for i in 0..s {
            let (a, b) = (alpha[t * s + i], beta[t * s + i]);
            if a == ninf || b == ninf {
                continue;
            }
            let post = (a + b - lp(t, ext[i]) - log_p).exp();
            grad[t * vocab + ext[i]] -= post;
        }
    }
    Some(CtcResult { loss: -log_p, grad })
}
