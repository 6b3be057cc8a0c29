//! Hybrid CTC/attention beam search, WER and per-modality evaluation.

mod prefix;
mod wer;

pub use prefix::{greedy_ctc_decode, CtcPrefixScorer, PrefixState};
pub use wer::{corpus_wer, edit_distance, wer};

use std::cmp::Ordering;
use std::io::Write;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Ctx, ParamStore, Scalar, TensorError, Var};
use crate::data::{corrupt_audio, DataError, LabelledSample, Tokenizer, Vocab};
use crate::exec::Exec;
use crate::model::{InputBatch, Modality, Model, ModelError};

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

type Result<T> = std::result::Result<T, DecodeError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    /// CTC weight in the combined score.
    pub alpha: f64,
    pub beam_size: usize,
    /// Per-token length bonus.
    pub beta: f64,
    /// Hypotheses are capped at `ceil(max_len_factor · T_v)` content tokens.
    pub max_len_factor: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beam_size: 8,
            beta: 0.0,
            max_len_factor: 1.0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DecodeError::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.beam_size == 0 {
            return Err(DecodeError::Config("beam_size must be positive".into()));
        }
        if !self.beta.is_finite() || !(self.max_len_factor > 0.0 && self.max_len_factor.is_finite()) {
            return Err(DecodeError::Config("beta and max_len_factor must be finite, factor > 0".into()));
        }
        Ok(())
    }

    pub fn max_len(&self, frames: usize) -> usize {
        ((self.max_len_factor * frames as f64).ceil() as usize).max(1)
    }
}

/// Source of next-token log-probabilities for a set of prefixes
/// (content tokens, without sos). Rows span the full output vocabulary.
pub trait AttentionScorer {
    fn next_log_probs(&mut self, prefixes: &[&[usize]]) -> std::result::Result<Vec<Vec<f64>>, TensorError>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub s_att: f64,
    pub s_ctc: f64,
    pub combined: f64,
    pub finished: bool,
}

/// Decoder result; `finished == false` means no hypothesis ended with eos
/// and the best unfinished one was returned instead.
#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    pub finished: bool,
}

fn combine(alpha: f64, beta: f64, s_ctc: f64, s_att: f64, len: usize) -> f64 {
    let base = if alpha == 0.0 {
        s_att
    } else if alpha == 1.0 {
        s_ctc
    } else {
        alpha * s_ctc + (1.0 - alpha) * s_att
    };
    base + beta * len as f64
}

fn by_score(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.combined.total_cmp(&a.combined)
}

/// Length-synchronous joint beam search. Each step extends every live
/// hypothesis by each content token and by eos, keeps the `beam_size`
/// best candidates, and moves those ending in eos to the finished set.
/// At `max_len` content tokens only eos is proposed. The search stops once
/// the best finished score reaches every live score, since extensions can
/// only lower a score when `beta ≤ 0`.
pub fn hybrid_beam_search<S: AttentionScorer>(
    scorer: &mut S,
    ctc: &CtcPrefixScorer,
    vocab: Vocab,
    cfg: &DecodeConfig,
    max_len: usize,
) -> Result<BeamResult> {
    cfg.validate()?;
    let eos = vocab.eos();
    let mut live: Vec<(Hypothesis, PrefixState)> = vec![(
        Hypothesis {
            tokens: Vec::new(),
            s_att: 0.0,
            s_ctc: 0.0,
            combined: 0.0,
            finished: false,
        },
        ctc.initial(),
    )];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let use_ctc = cfg.alpha > 0.0;
    for step in 0..=max_len {
        let prefixes: Vec<&[usize]> = live.iter().map(|(h, _)| h.tokens.as_slice()).collect();
        let att = scorer.next_log_probs(&prefixes)?;
        let mut cands: Vec<(Hypothesis, Option<PrefixState>)> = Vec::new();
        for ((h, st), lp) in live.iter().zip(&att) {
            let s_ctc = if use_ctc { ctc.final_score(st) } else { 0.0 };
            let s_att = h.s_att + lp[eos];
            cands.push((
                Hypothesis {
                    tokens: h.tokens.clone(),
                    s_att,
                    s_ctc,
                    combined: combine(cfg.alpha, cfg.beta, s_ctc, s_att, h.tokens.len()),
                    finished: true,
                },
                None,
            ));
            if step == max_len {
                continue;
            }
            for c in 0..vocab.content {
                let (s_ctc, ns) = if use_ctc {
                    let (p, ns) = ctc.extend(st, c);
                    (p, Some(ns))
                } else {
                    (0.0, Some(st.clone()))
                };
                let s_att = h.s_att + lp[c];
                let mut tokens = h.tokens.clone();
                tokens.push(c);
                let combined = combine(cfg.alpha, cfg.beta, s_ctc, s_att, tokens.len());
                cands.push((
                    Hypothesis {
                        tokens,
                        s_att,
                        s_ctc,
                        combined,
                        finished: false,
                    },
                    ns,
                ));
            }
        }
        cands.sort_by(|a, b| by_score(&a.0, &b.0));
        cands.truncate(cfg.beam_size);
        live.clear();
        for (h, st) in cands {
            match st {
                None => finished.push(h),
                Some(st) => live.push((h, st)),
            }
        }
        if live.is_empty() {
            break;
        }
        let best_fin = finished.iter().map(|h| h.combined).fold(f64::NEG_INFINITY, f64::max);
        let best_live = live.iter().map(|(h, _)| h.combined).fold(f64::NEG_INFINITY, f64::max);
        if cfg.beta <= 0.0 && best_fin >= best_live && best_fin > f64::NEG_INFINITY {
            break;
        }
    }
    finished.sort_by(by_score);
    if let Some(best) = finished.into_iter().next() {
        return Ok(BeamResult { best, finished: true });
    }
    live.sort_by(|a, b| by_score(&a.0, &b.0));
    let best = live
        .into_iter()
        .next()
        .map(|(h, _)| h)
        .ok_or_else(|| DecodeError::Config("empty beam".into()))?;
    warn!("beam search produced no finished hypothesis; returning best unfinished");
    Ok(BeamResult { best, finished: false })
}

/// Attention scorer backed by the model decoder over one utterance's
/// encoder output. The decoder is recomputed over each whole prefix.
pub struct ModelScorer<'m, 'c, 's, T: Scalar> {
    model: &'m Model,
    ctx: &'c mut Ctx<'s, T>,
    enc: Var,
    enc_len: usize,
}

impl<'m, 'c, 's, T: Scalar> ModelScorer<'m, 'c, 's, T> {
    /// `enc` must be a single-row `[1, T, D]` node.
    pub fn new(model: &'m Model, ctx: &'c mut Ctx<'s, T>, enc: Var, enc_len: usize) -> Self {
        Self {
            model,
            ctx,
            enc,
            enc_len,
        }
    }
}

impl<T: Scalar> AttentionScorer for ModelScorer<'_, '_, '_, T> {
    fn next_log_probs(&mut self, prefixes: &[&[usize]]) -> std::result::Result<Vec<Vec<f64>>, TensorError> {
        let k = prefixes.len();
        if k == 0 {
            return Ok(Vec::new());
        }
        let sos = self.model.config.vocab().sos();
        let y_in: Vec<Vec<usize>> = prefixes
            .iter()
            .map(|p| std::iter::once(sos).chain(p.iter().copied()).collect())
            .collect();
        let enc = if k == 1 {
            self.enc
        } else {
            self.ctx.g.concat(&vec![self.enc; k], 0)?
        };
        let logits = self.model.decode(self.ctx, enc, &vec![self.enc_len; k], &y_in)?;
        let lp = self.ctx.g.log_softmax(logits, 2)?;
        let l = self.ctx.g.shape(lp)[1];
        let vt = self.model.config.vocab_total;
        let val = self.ctx.g.value(lp);
        Ok(y_in
            .iter()
            .enumerate()
            .map(|(i, y)| {
                val.data()[(i * l + y.len() - 1) * vt..][..vt]
                    .iter()
                    .map(|x| x.f64())
                    .collect()
            })
            .collect())
    }
}

/// Beam-decodes one utterance in the given modality.
pub fn decode_views<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    views: &crate::data::Views,
    modality: Modality,
    cfg: &DecodeConfig,
) -> Result<BeamResult> {
    let batch: InputBatch<T> = InputBatch::from_views(&[views])?;
    let mut ctx = Ctx::frozen(store);
    let x = model.embed(&mut ctx, &batch, &[modality], None)?;
    let enc = model.encode(&mut ctx, x, &batch.lens)?.last;
    let lp = model.ctc_head(&mut ctx, enc)?;
    let frames = batch.lens[0];
    let vt = model.config.vocab_total;
    let lp_val: Vec<f64> = ctx.g.value(lp).data()[..frames * vt].iter().map(|x| x.f64()).collect();
    let vocab = model.config.vocab();
    let ctc = CtcPrefixScorer::new(lp_val, frames, vt, vocab.blank());
    let mut scorer = ModelScorer::new(model, &mut ctx, enc, frames);
    hybrid_beam_search(&mut scorer, &ctc, vocab, cfg, cfg.max_len(frames))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[derive(Default)]
pub struct EvalConfig {
    pub decode: DecodeConfig,
    /// Additive white noise on the audio view, `None` for clean input.
    pub snr_db: Option<f64>,
    pub noise_seed: u64,
}


const NOISE_TAG: u64 = 0x6e6f_6973_65;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceResult {
    pub id: u64,
    pub modality: Modality,
    pub reference: String,
    pub hypothesis: String,
    pub edits: usize,
    /// `None` for an empty reference.
    pub wer: Option<f64>,
    #[serde(skip)]
    pub finished: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub modality: Modality,
    pub wer: f64,
    pub edits: usize,
    pub ref_tokens: usize,
    pub utterances: usize,
    pub unfinished: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub summary: EvalSummary,
    pub utterances: Vec<UtteranceResult>,
}

/// Decodes every sample in `modality` and scores against its labels.
/// Utterances are independent and run through `exec`.
pub fn evaluate<T: Scalar>(
    model: &Model,
    store: &ParamStore<T>,
    samples: &[LabelledSample],
    modality: Modality,
    cfg: &EvalConfig,
    exec: Exec,
) -> Result<EvalReport> {
    cfg.decode.validate()?;
    let tok = Tokenizer::new(model.config.vocab())?;
    let results = exec.map(samples, |s| -> Result<(UtteranceResult, usize)> {
        let views = match cfg.snr_db {
            Some(snr) => {
                let mut rng = ChaCha8Rng::seed_from_u64(crate::rng::stream(cfg.noise_seed, NOISE_TAG, s.id));
                corrupt_audio(&s.views, snr, &mut rng)?
            }
            None => s.views.clone(),
        };
        let res = decode_views(model, store, &views, modality, &cfg.decode)?;
        let hyp = &res.best.tokens;
        let edits = edit_distance(&s.labels, hyp);
        Ok((
            UtteranceResult {
                id: s.id,
                modality,
                reference: tok.render(&s.labels),
                hypothesis: tok.render(hyp),
                edits,
                wer: wer(&s.labels, hyp),
                finished: res.finished,
            },
            s.labels.len(),
        ))
    });
    let mut utterances = Vec::with_capacity(samples.len());
    let (mut edits, mut ref_tokens) = (0, 0);
    for r in results {
        let (u, n) = r?;
        edits += u.edits;
        ref_tokens += n;
        utterances.push(u);
    }
    let unfinished = utterances.iter().filter(|u| !u.finished).count();
    Ok(EvalReport {
        summary: EvalSummary {
            modality,
            wer: corpus_wer(edits, ref_tokens),
            edits,
            ref_tokens,
            utterances: utterances.len(),
            unfinished,
        },
        utterances,
    })
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    summary: bool,
    #[serde(flatten)]
    inner: &'a EvalSummary,
}

/// One JSON object per utterance, then one summary line per report.
pub fn write_reports<W: Write>(mut w: W, reports: &[EvalReport]) -> Result<()> {
    for r in reports {
        for u in &r.utterances {
            serde_json::to_writer(&mut w, u)?;
            writeln!(w)?;
        }
    }
    for r in reports {
        serde_json::to_writer(
            &mut w,
            &SummaryLine {
                summary: true,
                inner: &r.summary,
            },
        )?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn save_reports(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_reports(f, reports)
}

#[cfg(test)]
mod tests;
