use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Views};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub video_mask_max_frac: f64,
    pub audio_mask_max_frac: f64,
    /// Video frames per masking window.
    pub frames_per_second: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            video_mask_max_frac: 0.4,
            audio_mask_max_frac: 0.6,
            frames_per_second: 8,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let ok = |f: f64| (0.0..=1.0).contains(&f);
        if !ok(self.video_mask_max_frac) || !ok(self.audio_mask_max_frac) {
            return Err(DataError::Config("mask fractions must be in [0, 1]".into()));
        }
        if self.frames_per_second == 0 {
            return Err(DataError::Config("frames_per_second must be positive".into()));
        }
        Ok(())
    }
}

/// Maps three uniform draws in `[0, 1)` to a masked span `(start, len)`
/// inside a window. The length is `x ~ U[0, max_frac·window]`, rounded
/// stochastically so that `E[len] = max_frac·window / 2` exactly; the start is
/// uniform over the positions where the span fits. `u_len = 1` is the
/// maximal draw.
pub fn sample_window_span(
    window_len: usize,
    max_frac: f64,
    u_len: f64,
    u_round: f64,
    u_start: f64,
) -> (usize, usize) {
    let x = u_len * max_frac * window_len as f64;
    let base = x.floor();
    let len = (base as usize + usize::from(u_round < x - base)).min(window_len);
    let slots = window_len - len + 1;
    let start = ((u_start * slots as f64) as usize).min(slots - 1);
    (start, len)
}

/// Zeroes one random span per window in place; returns the frame mask.
fn mask_stream<R: Rng>(
    data: &mut [f32],
    frames: usize,
    dim: usize,
    window: usize,
    max_frac: f64,
    rng: &mut R,
) -> Vec<bool> {
    let mut mask = vec![false; frames];
    if max_frac == 0.0 {
        return mask;
    }
    let mut w0 = 0;
    while w0 < frames {
        let w = window.min(frames - w0);
        let (s, l) = sample_window_span(w, max_frac, rng.random(), rng.random(), rng.random());
        for t in w0 + s..w0 + s + l {
            mask[t] = true;
            data[t * dim..(t + 1) * dim].fill(0.0);
        }
        w0 += w;
    }
    mask
}

/// Training-time zero masking of student inputs. Frame counts never change.
pub fn zero_mask_augment<R: Rng>(views: &Views, cfg: &AugmentConfig, rng: &mut R) -> Views {
    let mut out = views.clone();
    let (tv, ta) = (views.video_frames(), views.audio_frames());
    let r = if tv == 0 { 1 } else { ta / tv };
    let vd = views.video.shape()[1];
    let ad = views.audio.shape()[1];
    let fps = cfg.frames_per_second;
    mask_stream(out.video.data_mut(), tv, vd, fps, cfg.video_mask_max_frac, rng);
    mask_stream(out.audio.data_mut(), ta, ad, fps * r, cfg.audio_mask_max_frac, rng);
    out
}

/// Adds white Gaussian noise to the audio view at the requested SNR (dB).
/// `f64::INFINITY` leaves the sample unchanged.
pub fn corrupt_audio<R: Rng>(views: &Views, snr_db: f64, rng: &mut R) -> Result<Views, DataError> {
    if snr_db == f64::INFINITY {
        return Ok(views.clone());
    }
    if !snr_db.is_finite() {
        return Err(DataError::Config(format!("snr_db must be finite or +inf, got {snr_db}")));
    }
    let power = signal_power(views.audio.data());
    if power == 0.0 {
        return Err(DataError::ZeroPower);
    }
    let sigma = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let mut out = views.clone();
    for x in out.audio.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x += (sigma * z) as f32;
    }
    Ok(out)
}

pub(crate) fn signal_power(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / x.len() as f64
}
