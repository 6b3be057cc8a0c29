//! Incremental CTC prefix probabilities for joint decoding.

/// Forward variables of one prefix: log-probabilities that the first `t+1`
/// frames emit exactly the prefix, ending in a non-blank (`gn`) or blank
/// (`gb`) frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixState {
    pub gn: Vec<f64>,
    pub gb: Vec<f64>,
    pub last: Option<usize>,
}

fn lse(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Prefix scorer over CTC log-probabilities `[T, V]`.
#[derive(Clone, Debug)]
pub struct CtcPrefixScorer {
    logp: Vec<f64>,
    frames: usize,
    vocab: usize,
    blank: usize,
}

impl CtcPrefixScorer {
    pub fn new(logp: Vec<f64>, frames: usize, vocab: usize, blank: usize) -> Self {
        assert_eq!(logp.len(), frames * vocab, "logp must be [T, V]");
        Self {
            logp,
            frames,
            vocab,
            blank,
        }
    }

    fn lp(&self, t: usize, k: usize) -> f64 {
        self.logp[t * self.vocab + k]
    }

    /// State of the empty prefix: all-blank paths.
    pub fn initial(&self) -> PrefixState {
        let mut gb = Vec::with_capacity(self.frames);
        let mut acc = 0.0;
        for t in 0..self.frames {
            acc += self.lp(t, self.blank);
            gb.push(acc);
        }
        PrefixState {
            gn: vec![f64::NEG_INFINITY; self.frames],
            gb,
            last: None,
        }
    }

    /// Extends prefix `g` (state `s`) by token `c`; returns the log
    /// probability that the output starts with `g + c` and the new state.
    pub fn extend(&self, s: &PrefixState, c: usize) -> (f64, PrefixState) {
        let t_n = self.frames;
        let ninf = f64::NEG_INFINITY;
        let mut gn = vec![ninf; t_n];
        let mut gb = vec![ninf; t_n];
        if t_n == 0 {
            return (
                ninf,
                PrefixState {
                    gn,
                    gb,
                    last: Some(c),
                },
            );
        }
        // probability mass of g at frame t that may be followed by c
        let phi = |t: usize| {
            if s.last == Some(c) {
                s.gb[t]
            } else {
                lse(s.gn[t], s.gb[t])
            }
        };
        if s.last.is_none() {
            gn[0] = self.lp(0, c);
        }
        let mut psi = gn[0];
        for t in 1..t_n {
            let p = phi(t - 1);
            let pc = self.lp(t, c);
            gn[t] = lse(gn[t - 1], p) + pc;
            gb[t] = lse(gb[t - 1], gn[t - 1]) + self.lp(t, self.blank);
            psi = lse(psi, p + pc);
        }
        (
            psi,
            PrefixState {
                gn,
                gb,
                last: Some(c),
            },
        )
    }

    /// Log probability that the whole output equals the prefix.
    pub fn final_score(&self, s: &PrefixState) -> f64 {
        match self.frames {
            0 => {
                if s.last.is_none() {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            t => lse(s.gn[t - 1], s.gb[t - 1]),
        }
    }

    /// Prefix score of a whole token sequence (0 for the empty prefix).
    pub fn prefix_score(&self, prefix: &[usize]) -> f64 {
        let mut s = self.initial();
        let mut psi = 0.0;
        for &c in prefix {
            let (p, ns) = self.extend(&s, c);
            psi = p;
            s = ns;
        }
        psi
    }

    /// `log p(output = seq)` via the prefix recursion.
    pub fn sequence_score(&self, seq: &[usize]) -> f64 {
        let mut s = self.initial();
        for &c in seq {
            s = self.extend(&s, c).1;
        }
        self.final_score(&s)
    }
}

/// Per-frame argmax, merge repeats, drop blanks.
pub fn greedy_ctc_decode(logp: &[f64], frames: usize, vocab: usize, blank: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for t in 0..frames {
        let row = &logp[t * vocab..(t + 1) * vocab];
        let mut k = 0;
        for (j, &x) in row.iter().enumerate() {
            if x > row[k] {
                k = j;
            }
        }
        if Some(k) != prev && k != blank {
            out.push(k);
        }
        prev = Some(k);
    }
    out
}
