//! AdamW with global-norm clipping and the warmup + cosine schedule.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::autodiff::{Grads, ParamStore, Scalar};
use crate::model::OptimizerState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    /// Utterances per labelled batch.
    pub batch_labelled: usize,
    /// Utterances per unlabelled batch.
    pub batch_unlabelled: usize,
    /// Upper bound on video frames per batch; 0 disables the cap.
    pub max_batch_frames: usize,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            peak_lr: 3e-3,
            warmup_epochs: 20,
            total_epochs: 75,
            betas: (0.9, 0.98),
            eps: 1e-8,
            weight_decay: 0.04,
            grad_clip: 3.0,
            batch_labelled: 16,
            batch_unlabelled: 16,
            max_batch_frames: 0,
            seed: 42,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |f: &str, why: &str| Err(TrainError::Config(format!("optim.{f}: {why}")));
        if self.total_epochs == 0 {
            return bad("total_epochs", "must be positive");
        }
        if self.warmup_epochs >= self.total_epochs {
            return bad("warmup_epochs", "must be below total_epochs");
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad("peak_lr", "must be positive");
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return bad("betas", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", "must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip", "must be positive");
        }
        if self.batch_labelled == 0 || self.batch_unlabelled == 0 {
            return bad("batch_labelled", "batch sizes must be positive");
        }
        Ok(())
    }
}

/// Step-level schedule derived from epochs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(cfg: &OptimConfig, steps_per_epoch: usize) -> Self {
        Self {
            peak: cfg.peak_lr,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.total_epochs * steps_per_epoch,
        }
    }
}

/// Linear 0 → peak over the warmup, then cosine peak → 0 at `total_steps`.
pub fn lr_schedule(step: usize, s: &LrSchedule) -> f64 {
    if step < s.warmup_steps {
        return s.peak * step as f64 / s.warmup_steps as f64;
    }
    if step >= s.total_steps {
        return 0.0;
    }
    let span = (s.total_steps - s.warmup_steps) as f64;
    let x = (step - s.warmup_steps) as f64 / span;
    s.peak * 0.5 * (1.0 + (std::f64::consts::PI * x).cos())
}

/// Scales `grads` in place so their global norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.values.iter_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// AdamW with decoupled weight decay and bias-corrected moments, kept in
/// `f64` regardless of the parameter type.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub clip: f64,
    /// Per-parameter learning-rate multiplier (0 freezes a parameter).
    pub lr_scale: Vec<f64>,
    /// Per-parameter weight-decay switch.
    pub decay: Vec<bool>,
    pub state: OptimizerState,
    pub skipped: usize,
}

/// What happened on one call to [`AdamW::step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    Skipped,
}

impl AdamW {
    /// Weight decay applies to matrices only; vectors (biases, norm gains,
    /// the mask token) are not decayed.
    pub fn new<T: Scalar>(store: &ParamStore<T>, cfg: &OptimConfig) -> Self {
        Self {
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            clip: cfg.grad_clip,
            lr_scale: vec![1.0; store.len()],
            decay: store.iter().map(|(_, p)| p.value.ndim() >= 2).collect(),
            state: OptimizerState {
                step: 0,
                m: store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect(),
                v: store.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect(),
            },
            skipped: 0,
        }
    }

    /// Clips, then applies one update at learning rate `lr`. Non-finite
    /// gradients skip the update and are counted.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, grads: &mut Grads<T>, lr: f64) -> StepOutcome {
        if !grads.all_finite() {
            self.skipped += 1;
            return StepOutcome::Skipped;
        }
        let grad_norm = clip_global_norm(grads, self.clip);
        self.state.step += 1;
        let t = self.state.step as i32;
        let (b1, b2) = self.betas;
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let lr_i = lr * self.lr_scale[i];
            if lr_i == 0.0 {
                continue;
            }
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let g = grads.get(id);
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for (j, p) in store.get_mut(id).data_mut().iter_mut().enumerate() {
                let gj = g[j].f64();
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                let mut x = p.f64();
                x -= lr_i * wd * x;
                x -= lr_i * mh / (vh.sqrt() + self.eps);
                *p = T::of(x);
            }
        }
        StepOutcome::Applied { grad_norm }
    }
}
