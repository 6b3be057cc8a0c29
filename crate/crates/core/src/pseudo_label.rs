//! EMA teacher maintenance and greedy pseudo-labels with token-wise
//! confidence filtering.

use crate::autodiff::{Ctx, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::model::{InputBatch, Modality, Model};

type Result<T> = std::result::Result<T, TensorError>;

/// `θ_t ← μ·θ_t + (1 − μ)·θ_s` over every parameter.
pub fn ema_update(teacher: &mut ParamStore<f32>, student: &ParamStore<f32>, mu: f64) -> Result<()> {
    if !teacher.same_layout(student) {
        return Err(TensorError::Invalid {
            op: "ema_update",
            msg: "teacher and student layouts differ".into(),
        });
    }
    if !(0.0..=1.0).contains(&mu) {
        return Err(TensorError::Invalid {
            op: "ema_update",
            msg: format!("momentum {mu} outside [0, 1]"),
        });
    }
    let ids: Vec<_> = student.iter().map(|(id, _)| id).collect();
    for id in ids {
        let s = student.get(id).data();
        for (t, &sv) in teacher.get_mut(id).data_mut().iter_mut().zip(s) {
            *t = (mu * *t as f64 + (1.0 - mu) * sv as f64) as f32;
        }
    }
    Ok(())
}

/// Cosine increase of the EMA momentum from `mu0` at step 0 to exactly 1
/// at `total`: `μ(t) = 1 − (1 − μ0)·(cos(πt/T) + 1)/2`.
pub fn momentum_schedule(step: usize, total: usize, mu0: f64) -> f64 {
    if step == 0 {
        return mu0;
    }
    if step >= total {
        return 1.0;
    }
    let c = (std::f64::consts::PI * step as f64 / total as f64).cos();
    1.0 - (1.0 - mu0) * (c + 1.0) / 2.0
}

/// `mask_i = conf_i ≥ τ`.
pub fn filter(conf: &[f64], tau: f64) -> Vec<bool> {
    conf.iter().map(|&c| c >= tau).collect()
}

/// Teacher outputs for one unlabelled sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    /// Per-frame argmax of the teacher's CTC distribution (blank allowed).
    pub ctc_frames: Vec<usize>,
    pub ctc_conf: Vec<f64>,
    /// Greedy decoder output, ending with eos unless the cap was reached.
    pub attn_tokens: Vec<usize>,
    pub attn_conf: Vec<f64>,
}

impl PseudoLabelSet {
    pub fn ctc_mask(&self, tau: f64) -> Vec<bool> {
        filter(&self.ctc_conf, tau)
    }

    pub fn attn_mask(&self, tau: f64) -> Vec<bool> {
        filter(&self.attn_conf, tau)
    }
}

/// Generation cap for greedy decoding of a `frames`-long input.
pub fn max_pseudo_len(frames: usize) -> usize {
    frames + 2
}

fn argmax_row(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (k, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = k;
        }
    }
    (best, row[best])
}

/// Argmax restricted to the tokens a decoder may emit: content and eos.
pub fn argmax_output(row: &[f64], vocab: crate::data::Vocab) -> (usize, f64) {
    let (mut k, mut best) = argmax_row(&row[..vocab.content]);
    if row[vocab.eos()] > best {
        k = vocab.eos();
        best = row[k];
    }
    (k, best)
}

/// Per-frame argmax of `logp[R, T, V]` up to each row's length, with the
/// chosen probability.
pub fn ctc_argmax<T: Scalar>(logp: &Tensor<T>, lens: &[usize]) -> Vec<(Vec<usize>, Vec<f64>)> {
    let (t_max, v) = (logp.shape()[1], logp.shape()[2]);
    lens.iter()
        .enumerate()
        .map(|(r, &len)| {
            (0..len)
                .map(|t| {
                    let row: Vec<f64> = logp.data()[(r * t_max + t) * v..][..v].iter().map(|x| x.f64()).collect();
                    let (k, lp) = argmax_row(&row);
                    (k, lp.exp())
                })
                .unzip()
        })
        .collect()
}

/// Batched greedy decoding: starting from sos, each row appends its most
/// likely next token (content or eos) until it emits eos or reaches
/// `caps[r]` tokens.
/// Returns the tokens and the probability of each choice.
pub fn greedy_attention<T: Scalar>(
    model: &Model,
    ctx: &mut Ctx<T>,
    enc: Var,
    enc_lens: &[usize],
    caps: &[usize],
) -> Result<Vec<(Vec<usize>, Vec<f64>)>> {
    let vocab = model.config.vocab();
    let rows = enc_lens.len();
    let mut out: Vec<(Vec<usize>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); rows];
    let mut done: Vec<bool> = caps.iter().map(|&c| c == 0).collect();
    let vt = model.config.vocab_total;
    while done.iter().any(|d| !d) {
        let active: Vec<usize> = (0..rows).filter(|&r| !done[r]).collect();
        let y_in: Vec<Vec<usize>> = active
            .iter()
            .map(|&r| std::iter::once(vocab.sos()).chain(out[r].0.iter().copied()).collect())
            .collect();
        let sub_enc = select_rows(ctx, enc, &active)?;
        let sub_lens: Vec<usize> = active.iter().map(|&r| enc_lens[r]).collect();
        let logits = model.decode(ctx, sub_enc, &sub_lens, &y_in)?;
        let l = ctx.g.shape(logits)[1];
        let val = ctx.g.value(logits);
        for (i, &r) in active.iter().enumerate() {
            let pos = y_in[i].len() - 1;
            let row = log_softmax_f64(&val.data()[(i * l + pos) * vt..][..vt]);
            let (k, lpk) = argmax_output(&row, vocab);
            out[r].0.push(k);
            out[r].1.push(lpk.exp());
            if k == vocab.eos() || out[r].0.len() >= caps[r] {
                done[r] = true;
            }
        }
    }
    Ok(out)
}

/// Log-softmax of a logit row in double precision, so confidences of
/// very peaked rows stay below 1.
pub fn log_softmax_f64<T: Scalar>(row: &[T]) -> Vec<f64> {
    let x: Vec<f64> = row.iter().map(|v| v.f64()).collect();
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Rows `idx` of a `[R, ..]` node, stacked in order.
fn select_rows<T: Scalar>(ctx: &mut Ctx<T>, x: Var, idx: &[usize]) -> Result<Var> {
    let n = ctx.g.shape(x)[0];
    if idx.len() == n && idx.iter().enumerate().all(|(i, &r)| i == r) {
        return Ok(x);
    }
    let parts = idx
        .iter()
        .map(|&r| ctx.g.narrow(x, 0, r, 1))
        .collect::<Result<Vec<_>>>()?;
    ctx.g.concat(&parts, 0)
}

/// One gradient-free teacher forward on the unmasked audiovisual view of
/// each sample, producing both CTC and attention pseudo-labels.
/// Confidences are computed from the logits in double precision.
pub fn generate_pseudo_labels(
    model: &Model,
    teacher: &ParamStore<f32>,
    batch: &InputBatch<f32>,
) -> Result<Vec<PseudoLabelSet>> {
    let mut ctx = Ctx::frozen(teacher);
    let x = model.embed(&mut ctx, batch, &[Modality::Av], None)?;
    let enc = model.encode(&mut ctx, x, &batch.lens)?.last;
    let logits = model.ctc.forward(&mut ctx, enc)?;
    let lv = ctx.g.value(logits);
    let v = lv.shape()[2];
    let lp: Vec<f64> = lv.data().chunks(v).flat_map(log_softmax_f64).collect();
    let ctc = ctc_argmax(&Tensor::new(lv.shape(), lp)?, &batch.lens);
    let caps: Vec<usize> = batch.lens.iter().map(|&l| max_pseudo_len(l)).collect();
    let attn = greedy_attention(model, &mut ctx, enc, &batch.lens, &caps)?;
    Ok(ctc
        .into_iter()
        .zip(attn)
        .map(|((ctc_frames, ctc_conf), (attn_tokens, attn_conf))| PseudoLabelSet {
            ctc_frames,
            ctc_conf,
            attn_tokens,
            attn_conf,
        })
        .collect())
}

/// Kept/total token counts and confidence sums over a logging window.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KeptStats {
    pub ctc_kept: usize,
    pub ctc_total: usize,
    pub ctc_conf_sum: f64,
    pub attn_kept: usize,
    pub attn_total: usize,
    pub attn_conf_sum: f64,
}

impl KeptStats {
    pub fn record(&mut self, p: &PseudoLabelSet, tau: f64) {
        self.ctc_kept += p.ctc_mask(tau).iter().filter(|&&k| k).count();
        self.ctc_total += p.ctc_conf.len();
        self.ctc_conf_sum += p.ctc_conf.iter().sum::<f64>();
        self.attn_kept += p.attn_mask(tau).iter().filter(|&&k| k).count();
        self.attn_total += p.attn_conf.len();
        self.attn_conf_sum += p.attn_conf.iter().sum::<f64>();
    }

    fn ratio(a: f64, b: usize) -> Option<f64> {
        (b > 0).then(|| a / b as f64)
    }

    /// Kept fraction of CTC frames; `None` when the window saw no tokens.
    pub fn kept_fraction_ctc(&self) -> Option<f64> {
        Self::ratio(self.ctc_kept as f64, self.ctc_total)
    }

    pub fn kept_fraction_attn(&self) -> Option<f64> {
        Self::ratio(self.attn_kept as f64, self.attn_total)
    }

    pub fn mean_conf_ctc(&self) -> Option<f64> {
        Self::ratio(self.ctc_conf_sum, self.ctc_total)
    }

    pub fn mean_conf_attn(&self) -> Option<f64> {
        Self::ratio(self.attn_conf_sum, self.attn_total)
    }
}
