//! Supervised and semi-supervised training losses and their weighted
//! aggregation across modalities.
//!
//! Every loss is a graph node, so the aggregate differentiates back into the
//! student. Per-sample losses are sums over frames or tokens; batch losses
//! average them over the batch.

mod ctc;
#[cfg(test)]
mod tests;

pub use ctc::{ctc_loss, min_frames, CtcResult};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, TensorError, Var};
use crate::model::Modality;

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_ctc: f64,
    pub lambda_v: f64,
    pub gamma_a: f64,
    pub gamma_v: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ctc: 0.1,
            lambda_v: 0.3,
            gamma_a: 0.5,
            gamma_v: 0.2,
            tau: 0.8,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda_ctc", self.lambda_ctc),
            ("lambda_v", self.lambda_v),
            ("gamma_a", self.gamma_a),
            ("gamma_v", self.gamma_v),
            ("tau", self.tau),
        ];
        for (name, v) in all {
            if !(0.0..=1.0).contains(&v) {
                return Err(TensorError::Invalid {
                    op: "loss_weights",
                    msg: format!("{name} = {v} outside [0, 1]"),
                });
            }
        }
        Ok(())
    }

    /// Weight of modality `m` in the labelled (and self-supervised) aggregate.
    pub fn modality_coef(&self, m: Modality) -> f64 {
        match m {
            Modality::V => self.lambda_v,
            Modality::A | Modality::Av => 1.0 - self.lambda_v,
        }
    }

    /// `(labelled, unlabelled)` weights of modality `m` in the
    /// semi-supervised aggregate.
    pub fn semi_coefs(&self, m: Modality) -> (f64, f64) {
        let gamma = match m {
            Modality::V => self.gamma_v,
            Modality::A | Modality::Av => self.gamma_a,
        };
        let c = self.modality_coef(m);
        (gamma * c, (1.0 - gamma) * c)
    }
}

/// Batch CTC loss over `logp[R, T, V]`: each row contributes
/// `row_weight · ctc(logp[r, ..lens[r]], labels[r])`. Rows without a valid
/// alignment contribute nothing; their count is returned.
pub fn ctc_batch_loss<T: Scalar>(
    g: &mut Graph<T>,
    logp: Var,
    lens: &[usize],
    labels: &[Vec<usize>],
    blank: usize,
    row_weight: f64,
) -> Result<(Var, usize)> {
    let shape = g.shape(logp).to_vec();
    if shape.len() != 3 || shape[0] != lens.len() || labels.len() != lens.len() {
        return Err(TensorError::Shape {
            op: "ctc_loss",
            lhs: shape,
            rhs: vec![lens.len(), labels.len()],
        });
    }
    let (rows, t_max, vocab) = (shape[0], shape[1], shape[2]);
    let data: Vec<f64> = g.value(logp).data().iter().map(|x| x.f64()).collect();
    let mut values = vec![T::ZERO; rows];
    let mut jac = vec![T::ZERO; rows * t_max * vocab];
    let mut skipped = 0;
    for r in 0..rows {
        let len = lens[r].min(t_max);
        let block = &data[r * t_max * vocab..(r * t_max + len) * vocab];
        if labels[r].iter().any(|&l| l == blank || l >= vocab) {
            return Err(TensorError::Invalid {
                op: "ctc_loss",
                msg: format!("row {r}: labels must be non-blank ids below {vocab}"),
            });
        }
        match ctc_loss(block, len, vocab, &labels[r], blank) {
            Some(res) => {
                values[r] = T::of(row_weight * res.loss);
                let dst = &mut jac[r * t_max * vocab..];
                for (d, &gr) in dst.iter_mut().zip(&res.grad) {
                    *d = T::of(row_weight * gr);
                }
            }
            None => skipped += 1,
        }
    }
    let per_row = g.row_function(logp, values, jac)?;
    Ok((g.sum(per_row), skipped))
}

/// `Σ_r Σ_j weights[r][j] · (−logp[r, j, targets[r][j]])` over
/// `logp[R, L, V]`; positions past a row's target length are ignored.
pub fn masked_nll<T: Scalar>(
    g: &mut Graph<T>,
    logp: Var,
    targets: &[Vec<usize>],
    weights: &[Vec<f64>],
) -> Result<Var> {
    let shape = g.shape(logp).to_vec();
    let bad = || TensorError::Shape {
        op: "masked_nll",
        lhs: shape.clone(),
        rhs: vec![targets.len()],
    };
    if shape.len() != 3 || shape[0] != targets.len() || weights.len() != targets.len() {
        return Err(bad());
    }
    let l = shape[1];
    let mut flat_t = Vec::with_capacity(shape[0] * l);
    let mut flat_w = Vec::with_capacity(shape[0] * l);
    for (t, w) in targets.iter().zip(weights) {
        if t.len() > l || w.len() != t.len() {
            return Err(bad());
        }
        for j in 0..l {
            flat_t.push(t.get(j).copied().unwrap_or(0));
            flat_w.push(T::of(w.get(j).copied().unwrap_or(0.0)));
        }
    }
    g.nll(logp, &flat_t, &flat_w)
}

/// Teacher-forced attention loss: summed token cross-entropy per row
/// (targets are labels followed by eos), scaled by `row_weight`.
pub fn attention_ce_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[Vec<usize>],
    row_weight: f64,
) -> Result<Var> {
    let shape = g.shape(logits).to_vec();
    if shape.len() != 3 || targets.iter().any(|t| t.len() > shape[1]) {
        return Err(TensorError::Shape {
            op: "attention_ce_loss",
            lhs: shape,
            rhs: targets.iter().map(Vec::len).collect(),
        });
    }
    let logp = g.log_softmax(logits, 2)?;
    let weights: Vec<Vec<f64>> = targets.iter().map(|t| vec![row_weight; t.len()]).collect();
    masked_nll(g, logp, targets, &weights)
}

/// Per-token weights for a confidence-filtered pseudo-label loss: kept
/// tokens weigh `1 / (kept · batch)`, so each sample's loss is its mean over
/// kept tokens and the batch loss averages samples. Samples with nothing
/// kept weigh zero.
pub fn kept_weights(masks: &[Vec<bool>], batch: usize) -> Vec<Vec<f64>> {
    masks
        .iter()
        .map(|m| {
            let kept = m.iter().filter(|&&k| k).count();
            m.iter()
                .map(|&k| {
                    if k {
                        1.0 / (kept as f64 * batch as f64)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Frame-wise cross-entropy of student CTC log-probabilities `logp[R, T, V]`
/// against the teacher's per-frame argmax, restricted to confident frames.
pub fn unlabelled_ctc_loss<T: Scalar>(
    g: &mut Graph<T>,
    logp: Var,
    lens: &[usize],
    teacher_frames: &[Vec<usize>],
    conf_masks: &[Vec<bool>],
    batch: usize,
) -> Result<Var> {
    if teacher_frames.len() != lens.len()
        || teacher_frames
            .iter()
            .zip(lens)
            .zip(conf_masks)
            .any(|((f, &l), m)| f.len() != l || m.len() != l)
    {
        return Err(TensorError::Invalid {
            op: "unlabelled_ctc_loss",
            msg: "teacher frames, masks and student lengths differ".into(),
        });
    }
    let weights = kept_weights(conf_masks, batch);
    masked_nll(g, logp, teacher_frames, &weights)
}

/// Token cross-entropy of student decoder logits (teacher-forced with sos +
/// pseudo tokens) against the pseudo tokens followed by eos, restricted to
/// confident tokens.
pub fn unlabelled_attention_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    pseudo_targets: &[Vec<usize>],
    conf_masks: &[Vec<bool>],
    batch: usize,
) -> Result<Var> {
    if pseudo_targets.iter().zip(conf_masks).any(|(t, m)| t.len() != m.len()) {
        return Err(TensorError::Invalid {
            op: "unlabelled_attention_loss",
            msg: "pseudo-label and mask lengths differ".into(),
        });
    }
    let logp = g.log_softmax(logits, 2)?;
    let weights = kept_weights(conf_masks, batch);
    masked_nll(g, logp, pseudo_targets, &weights)
}

/// CTC, attention and combined loss of one modality.
#[derive(Clone, Copy, Debug)]
pub struct ModalityLoss {
    pub ctc: Var,
    pub attention: Var,
    pub combined: Var,
}

/// Losses keyed by modality, kept in insertion order.
#[derive(Clone, Debug, Default)]
pub struct PerModalityLosses(pub Vec<(Modality, ModalityLoss)>);

impl PerModalityLosses {
    pub fn get(&self, m: Modality) -> Option<&ModalityLoss> {
        self.0.iter().find(|(k, _)| *k == m).map(|(_, l)| l)
    }

    pub fn insert(&mut self, m: Modality, l: ModalityLoss) {
        self.0.retain(|(k, _)| *k != m);
        self.0.push((m, l));
    }

    fn require(&self, m: Modality) -> Result<&ModalityLoss> {
        self.get(m).ok_or_else(|| TensorError::Invalid {
            op: "aggregate_loss",
            msg: format!("missing loss for modality {m}"),
        })
    }
}

/// `λ_ctc·C + (1 − λ_ctc)·A`.
pub fn combine_modality<T: Scalar>(g: &mut Graph<T>, ctc: Var, attention: Var, w: &LossWeights) -> Result<ModalityLoss> {
    let combined = g.linear_combination(&[(ctc, T::of(w.lambda_ctc)), (attention, T::of(1.0 - w.lambda_ctc))])?;
    Ok(ModalityLoss {
        ctc,
        attention,
        combined,
    })
}

/// `λ_v·L_v + (1 − λ_v)·(L_a + L_av)`.
pub fn supervised_loss<T: Scalar>(g: &mut Graph<T>, per_mod: &PerModalityLosses, w: &LossWeights) -> Result<Var> {
    let terms = Modality::ALL
        .iter()
        .map(|&m| Ok((per_mod.require(m)?.combined, T::of(w.modality_coef(m)))))
        .collect::<Result<Vec<_>>>()?;
    g.linear_combination(&terms)
}

/// Labelled and unlabelled modality losses weighed by `γ_v` (video) and
/// `γ_a` (audio, audiovisual) against each other, each pair scaled by the
/// modality weight.
pub fn semi_loss<T: Scalar>(
    g: &mut Graph<T>,
    labelled: &PerModalityLosses,
    unlabelled: &PerModalityLosses,
    w: &LossWeights,
) -> Result<Var> {
    let mut terms = Vec::with_capacity(6);
    for m in Modality::ALL {
        let (cl, cu) = w.semi_coefs(m);
        terms.push((labelled.require(m)?.combined, T::of(cl)));
        terms.push((unlabelled.require(m)?.combined, T::of(cu)));
    }
    g.linear_combination(&terms)
}

/// Modality-weighted sum of per-modality scalars, as used by the
/// self-supervised objective: `λ_v·x_v + (1 − λ_v)·(x_a + x_av)`.
pub fn weighted_by_modality<T: Scalar>(g: &mut Graph<T>, per_mod: &[(Modality, Var)], w: &LossWeights) -> Result<Var> {
    let terms = Modality::ALL
        .iter()
        .map(|&m| {
            per_mod
                .iter()
                .find(|(k, _)| *k == m)
                .map(|&(_, v)| (v, T::of(w.modality_coef(m))))
                .ok_or_else(|| TensorError::Invalid {
                    op: "weighted_by_modality",
                    msg: format!("missing loss for modality {m}"),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    g.linear_combination(&terms)
}
