//! Masked-prediction pre-training: span masks, teacher targets and the
//! masked cosine-similarity loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, Graph, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::losses::{weighted_by_modality, LossWeights};
use crate::model::{InputBatch, Modality, Model};

type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpanMaskConfig {
    pub start_prob: f64,
    pub span_frames: usize,
}

impl Default for SpanMaskConfig {
    fn default() -> Self {
        Self {
            start_prob: 0.4,
            span_frames: 3,
        }
    }
}

/// Video-rate mask `h` and the aligned audio-rate mask.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub video: Vec<bool>,
    pub audio: Vec<bool>,
}

impl MaskSpec {
    pub fn masked(&self) -> usize {
        self.video.iter().filter(|&&m| m).count()
    }
}

/// Every index independently starts a span with probability `start_prob`;
/// spans are clipped at the sequence end. The audio mask repeats each video
/// entry `r` times.
pub fn sample_span_mask<R: Rng>(frames: usize, cfg: &SpanMaskConfig, r: usize, rng: &mut R) -> MaskSpec {
    let mut video = vec![false; frames];
    for i in 0..frames {
        if rng.random_bool(cfg.start_prob.clamp(0.0, 1.0)) {
            for m in video.iter_mut().skip(i).take(cfg.span_frames) {
                *m = true;
            }
        }
    }
    let audio = video.iter().flat_map(|&m| std::iter::repeat_n(m, r)).collect();
    MaskSpec { video, audio }
}

/// Flattens per-sample masks to the padded `[N·T]` layout.
pub fn flatten_masks(masks: &[MaskSpec], t: usize) -> Vec<bool> {
    masks
        .iter()
        .flat_map(|m| m.video.iter().copied().chain(std::iter::repeat(false)).take(t))
        .collect()
}

/// Teacher targets `[N, T, D]`: instance-normalised mean of the per-block
/// encoder outputs on the unmasked `target` view.
pub fn build_targets<T: Scalar>(
    model: &Model,
    teacher: &ParamStore<T>,
    batch: &InputBatch<T>,
    target: Modality,
) -> Result<Tensor<T>> {
    let mut ctx = Ctx::frozen(teacher);
    let x = model.embed(&mut ctx, batch, &[target], None)?;
    let enc = model.encode(&mut ctx, x, &batch.lens)?;
    let n = enc.blocks.len();
    let terms: Vec<(Var, T)> = enc.blocks.iter().map(|&b| (b, T::of(1.0 / n as f64))).collect();
    let mean = ctx.g.linear_combination(&terms)?;
    let e = ctx.g.instance_norm(mean, Some(&batch.lens))?;
    Ok(ctx.g.value(e).clone())
}

/// `−Σ_b Σ_t h_bt·cos(p_bt, e_bt) / (count_b · B)` over `[N, T, D]`
/// predictions and targets. Samples without masked frames contribute 0.
pub fn masked_cosine_loss<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    targets: Var,
    masks: &[Vec<bool>],
    batch: usize,
) -> Result<Var> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 3 || shape[0] != masks.len() || masks.iter().any(|m| m.len() > shape[1]) {
        return Err(TensorError::Shape {
            op: "masked_cosine_loss",
            lhs: shape,
            rhs: vec![masks.len()],
        });
    }
    let (n, t, d) = (shape[0], shape[1], shape[2]);
    let cos = g.cosine_rows(pred, targets)?;
    let mut weights = vec![T::ZERO; n * t];
    let (pv, ev) = (g.value(pred).data(), g.value(targets).data());
    for (b, m) in masks.iter().enumerate() {
        let count = m.iter().filter(|&&x| x).count();
        for (i, &on) in m.iter().enumerate() {
            if !on {
                continue;
            }
            let row = b * t + i;
            let zero = |x: &[T]| x.iter().all(|&v| v == T::ZERO);
            if zero(&pv[row * d..(row + 1) * d]) || zero(&ev[row * d..(row + 1) * d]) {
                log::warn!("zero-norm vector at masked position {i} of sample {b}");
            }
            weights[row] = T::of(-1.0 / (count as f64 * batch as f64));
        }
    }
    g.weighted_sum(cos, weights)
}

/// Masked cosine loss of each modality's predictions against the shared
/// targets, combined with the modality weights.
pub fn pretrain_loss<T: Scalar>(
    g: &mut Graph<T>,
    per_mod: &[(Modality, Var)],
    w: &LossWeights,
) -> Result<Var> {
    weighted_by_modality(g, per_mod, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Views, Vocab};
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn span_mask_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let none = SpanMaskConfig {
            start_prob: 0.0,
            ..Default::default()
        };
        assert_eq!(sample_span_mask(20, &none, 4, &mut rng).masked(), 0);
        let all = SpanMaskConfig {
            start_prob: 1.0,
            ..Default::default()
        };
        let m = sample_span_mask(20, &all, 4, &mut rng);
        assert_eq!(m.masked(), 20);
        assert_eq!(m.audio.len(), 80);
    }

    #[test]
    fn audio_mask_is_upsampled_video_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = sample_span_mask(17, &SpanMaskConfig::default(), 3, &mut rng);
            for (i, &a) in m.audio.iter().enumerate() {
                assert_eq!(a, m.video[i / 3]);
            }
        }
    }

    #[test]
    fn interior_masked_fraction_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = SpanMaskConfig::default();
        let (t, draws) = (1000, 10_000);
        let mut masked = 0u64;
        let mut total = 0u64;
        for _ in 0..draws {
            let m = sample_span_mask(t, &cfg, 1, &mut rng);
            masked += m.video[2..].iter().filter(|&&x| x).count() as u64;
            total += (t - 2) as u64;
        }
        let want = 1.0 - (1.0f64 - 0.4).powi(3);
        assert!((want - 0.784).abs() < 1e-12);
        assert!((masked as f64 / total as f64 - want).abs() < 0.01);
    }

    fn cfg(blocks: usize) -> ModelConfig {
        ModelConfig {
            preset: "test".into(),
            encoder_blocks: blocks,
            decoder_blocks: 1,
            attn_dim: 8,
            attn_heads: 2,
            mlp_dim: 8,
            predictor_blocks: 2,
            predictor_dim: 8,
            extractor_dim: 4,
            vocab_total: Vocab::new(3).total(),
            video_dim: 3,
            audio_dim: 2,
            audio_rate_ratio: 2,
        }
    }

    fn batch(lens: &[usize], seed: u64) -> InputBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let views: Vec<Views> = lens
            .iter()
            .map(|&t| Views {
                video: Tensor::new(&[t, 3], (0..t * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap(),
                audio: Tensor::new(&[2 * t, 2], (0..t * 4).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap(),
            })
            .collect();
        let refs: Vec<&Views> = views.iter().collect();
        InputBatch::from_views(&refs).unwrap()
    }

    #[test]
    fn targets_are_instance_normalised() {
        let c = cfg(2);
        let (m, s) = Model::new(&c, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let s = s.cast::<f64>();
        let b = batch(&[12, 9], 4);
        let e = build_targets(&m, &s, &b, Modality::Av).unwrap();
        assert_eq!(e.shape(), [2, 12, 8]);
        for (row, &len) in b.lens.iter().enumerate() {
            for ch in 0..8 {
                let xs: Vec<f64> = (0..len).map(|t| e.data()[(row * 12 + t) * 8 + ch]).collect();
                let mean = xs.iter().sum::<f64>() / len as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len as f64;
                assert!(mean.abs() < 1e-6);
                assert!((var - 1.0).abs() < 1e-4, "var {var}");
            }
        }
    }

    #[test]
    fn one_block_average_is_last_block() {
        let c = cfg(1);
        let (m, s) = Model::new(&c, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let s = s.cast::<f64>();
        let b = batch(&[6], 6);
        let e = build_targets(&m, &s, &b, Modality::Av).unwrap();
        let mut ctx = Ctx::frozen(&s);
        let x = m.embed(&mut ctx, &b, &[Modality::Av], None).unwrap();
        let enc = m.encode(&mut ctx, x, &b.lens).unwrap();
        let direct = ctx.g.instance_norm(enc.blocks[0], Some(&b.lens)).unwrap();
        assert!(ctx.g.value(direct).max_abs_diff(&e) < 1e-12);
    }

    #[test]
    fn targets_are_channel_scale_invariant() {
        let c = cfg(1);
        let (m, s) = Model::new(&c, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let s = s.cast::<f64>();
        let b = batch(&[7], 8);
        let e = build_targets(&m, &s, &b, Modality::Av).unwrap();
        let mut ctx = Ctx::frozen(&s);
        let x = m.embed(&mut ctx, &b, &[Modality::Av], None).unwrap();
        let out = m.encode(&mut ctx, x, &b.lens).unwrap().blocks[0];
        let mut scaled = ctx.g.value(out).clone();
        for row in scaled.data_mut().chunks_mut(8) {
            row[2] *= 3.5;
        }
        let sc = ctx.constant(scaled);
        let e2 = ctx.g.instance_norm(sc, Some(&b.lens)).unwrap();
        // exact up to the variance-stabilising eps term
        assert!(ctx.g.value(e2).max_abs_diff(&e) < 1e-4);
    }

    #[test]
    fn cosine_loss_cases() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let neg: Vec<f64> = data.iter().map(|x| -x).collect();
        let p = g.param(Tensor::from_f64(&[2, 3, 4], &data).unwrap());
        let e = g.constant(Tensor::from_f64(&[2, 3, 4], &data).unwrap());
        let q = g.param(Tensor::from_f64(&[2, 3, 4], &neg).unwrap());
        let masks = vec![vec![true, false, true], vec![false, true, false]];
        let l = masked_cosine_loss(&mut g, p, e, &masks, 2).unwrap();
        assert!((g.value(l).item() + 1.0).abs() < 1e-12);
        let l = masked_cosine_loss(&mut g, q, e, &masks, 2).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-12);
        let none = vec![vec![false; 3], vec![false; 3]];
        let l = masked_cosine_loss(&mut g, p, e, &none, 2).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        let l = masked_cosine_loss(&mut g, p, e, &masks, 2).unwrap();
        g.backward(l).unwrap();
        let gr = g.grad(p).unwrap();
        // unmasked rows receive no gradient
        for row in [1, 3, 5] {
            assert!(gr.data()[row * 4..(row + 1) * 4].iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn pretrain_loss_cases() {
        let mut g = Graph::<f64>::new();
        let per: Vec<(Modality, Var)> = Modality::ALL
            .iter()
            .map(|&m| (m, g.param(Tensor::scalar(-1.0))))
            .collect();
        let l = pretrain_loss(&mut g, &per, &LossWeights::default()).unwrap();
        assert!((g.value(l).item() + 1.7).abs() < 1e-12);
        let w = LossWeights {
            lambda_v: 1.0,
            ..Default::default()
        };
        let per2 = vec![
            (Modality::V, g.param(Tensor::scalar(-0.25))),
            (Modality::A, g.param(Tensor::scalar(-1.0))),
            (Modality::Av, g.param(Tensor::scalar(-1.0))),
        ];
        let l = pretrain_loss(&mut g, &per2, &w).unwrap();
        assert_eq!(g.value(l).item(), -0.25);
    }

    #[test]
    fn masked_inputs_carry_no_sample_information() {
        let c = cfg(2);
        let (m, s) = Model::new(&c, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let s = s.cast::<f64>();
        let b = batch(&[6], 10);
        let mask = vec![false, true, true, false, false, true];
        let run = |b: &InputBatch<f64>| {
            let mut b = b.clone();
            b.zero_frames(&mask);
            let mut ctx = Ctx::frozen(&s);
            let x = m.embed(&mut ctx, &b, &Modality::ALL, Some(&mask)).unwrap();
            let enc = m.encode(&mut ctx, x, &[6, 6, 6]).unwrap().last;
            ctx.g.value(enc).clone()
        };
        let mut other = b.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for (f, &on) in mask.iter().enumerate() {
            if on {
                for x in &mut other.video.data_mut()[f * 3..(f + 1) * 3] {
                    *x = rng.random_range(-9.0..9.0);
                }
                for x in &mut other.audio.data_mut()[f * 4..(f + 1) * 4] {
                    *x = rng.random_range(-9.0..9.0);
                }
            }
        }
        assert!(run(&b).max_abs_diff(&run(&other)) < 1e-12);
    }
}
