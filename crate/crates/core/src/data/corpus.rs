use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, LabelledSample, UnlabelledSample, Views, Vocab};
use crate::autodiff::Tensor;
use crate::exec::Exec;
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub min_utterance_tokens: usize,
    pub max_utterance_tokens: usize,
    /// Mean number of video frames per token.
    pub frames_per_token: usize,
    /// Durations are drawn uniformly from `frames_per_token ± frames_jitter`.
    pub frames_jitter: usize,
    pub video_dim: usize,
    /// Audio frames per video frame (`r`).
    pub audio_rate_ratio: usize,
    pub audio_dim: usize,
    pub video_noise_sigma: f64,
    pub audio_noise_sigma: f64,
    /// Number of look-alike clusters for video patterns; 0 gives every token
    /// an independent pattern.
    pub viseme_groups: usize,
    /// Within-cluster spread of video patterns relative to the cluster centre.
    pub viseme_spread: f64,
    pub eval_utterances: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            vocab_size: 20,
            min_utterance_tokens: 3,
            max_utterance_tokens: 8,
            frames_per_token: 3,
            frames_jitter: 1,
            video_dim: 16,
            audio_rate_ratio: 4,
            audio_dim: 8,
            video_noise_sigma: 0.5,
            audio_noise_sigma: 0.1,
            viseme_groups: 5,
            viseme_spread: 0.5,
            eval_utterances: 100,
            seed: 42,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: &str| Err(DataError::Config(m.to_string()));
        if self.vocab_size < 2 || self.vocab_size > Vocab::max_content() {
            return bad("vocab_size must be in 2..=36");
        }
        if self.min_utterance_tokens < 1 || self.max_utterance_tokens < self.min_utterance_tokens {
            return bad("need max_utterance_tokens >= min_utterance_tokens >= 1");
        }
        if self.audio_rate_ratio < 1 {
            return bad("audio_rate_ratio must be >= 1");
        }
        if self.frames_per_token < 1 || self.frames_jitter >= self.frames_per_token {
            return bad("frames_per_token must exceed frames_jitter");
        }
        if self.video_dim == 0 || self.audio_dim == 0 {
            return bad("video_dim and audio_dim must be positive");
        }
        if !(self.video_noise_sigma >= 0.0 && self.audio_noise_sigma >= 0.0) {
            return bad("noise sigmas must be non-negative");
        }
        if self.viseme_spread < 0.0 {
            return bad("viseme_spread must be non-negative");
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.vocab_size)
    }
}

/// Fixed per-token rendering templates, a pure function of the config seed.
#[derive(Clone, Debug)]
pub struct Patterns {
    /// `[vocab, video_dim]`
    pub video: Vec<Vec<f32>>,
    /// `[vocab, r·audio_dim]`: one row of `r` audio frames per video frame.
    pub audio: Vec<Vec<f32>>,
}

impl Patterns {
    pub fn new(cfg: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, 0x5041_5454, 0));
        let mut normal = |n: usize| -> Vec<f64> {
            (0..n).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let groups = cfg.viseme_groups;
        let centres: Vec<Vec<f64>> = (0..groups).map(|_| normal(cfg.video_dim)).collect();
        let video = (0..cfg.vocab_size)
            .map(|tok| {
                let dev = normal(cfg.video_dim);
                if groups == 0 {
                    dev.iter().map(|&x| x as f32).collect()
                } else {
                    centres[tok % groups]
                        .iter()
                        .zip(&dev)
                        .map(|(&c, &d)| (c + cfg.viseme_spread * d) as f32)
                        .collect()
                }
            })
            .collect();
        let audio = (0..cfg.vocab_size)
            .map(|_| {
                normal(cfg.audio_rate_ratio * cfg.audio_dim)
                    .iter()
                    .map(|&x| x as f32)
                    .collect()
            })
            .collect();
        Self { video, audio }
    }
}

/// Rendered views plus the token index shown at each video frame.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub views: Views,
    pub frame_tokens: Vec<usize>,
}

/// Renders `tokens` into both views: each token holds for a jittered number
/// of video frames showing its video pattern, and `r` audio frames per video
/// frame showing its audio pattern, each with additive Gaussian noise.
pub fn render_views<R: Rng>(
    tokens: &[usize],
    patterns: &Patterns,
    cfg: &CorpusConfig,
    rng: &mut R,
) -> Result<Rendered, DataError> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(DataError::BadToken(bad));
    }
    let mut frame_tokens = Vec::new();
    for &tok in tokens {
        let lo = cfg.frames_per_token - cfg.frames_jitter;
        let hi = cfg.frames_per_token + cfg.frames_jitter;
        let k = rng.random_range(lo..=hi);
        frame_tokens.extend(std::iter::repeat_n(tok, k));
    }
    let t_v = frame_tokens.len();
    let r = cfg.audio_rate_ratio;
    let (vd, ad) = (cfg.video_dim, cfg.audio_dim);
    let mut video = Vec::with_capacity(t_v * vd);
    let mut audio = Vec::with_capacity(t_v * r * ad);
    for &tok in &frame_tokens {
        for &p in &patterns.video[tok] {
            video.push(p + noise(rng, cfg.video_noise_sigma));
        }
        for &p in &patterns.audio[tok] {
            audio.push(p + noise(rng, cfg.audio_noise_sigma));
        }
    }
    Ok(Rendered {
        views: Views {
            video: Tensor::new(&[t_v, vd], video).expect("video shape"),
            audio: Tensor::new(&[t_v * r, ad], audio).expect("audio shape"),
        },
        frame_tokens,
    })
}

fn noise<R: Rng>(rng: &mut R, sigma: f64) -> f32 {
    if sigma == 0.0 {
        return 0.0;
    }
    let z: f64 = StandardNormal.sample(rng);
    (sigma * z) as f32
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub labelled: Vec<LabelledSample>,
    pub unlabelled: Vec<UnlabelledSample>,
    pub eval: Vec<LabelledSample>,
}

const TRAIN_STREAM: u64 = 0x5452_4e;
const EVAL_STREAM: u64 = 0x4556_4c;

fn utterance(
    cfg: &CorpusConfig,
    patterns: &Patterns,
    tag: u64,
    index: usize,
) -> LabelledSample {
    let mut rng = ChaCha8Rng::seed_from_u64(stream(cfg.seed, tag, index as u64));
    let len = rng.random_range(cfg.min_utterance_tokens..=cfg.max_utterance_tokens);
    let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect();
    let rendered = render_views(&tokens, patterns, cfg, &mut rng).expect("tokens in range");
    let id = if tag == EVAL_STREAM {
        1_000_000_000 + index as u64
    } else {
        index as u64
    };
    LabelledSample {
        id,
        views: rendered.views,
        labels: tokens,
    }
}

/// Generates training utterances (the first `round(n·labelled_fraction)` keep
/// their labels) plus `cfg.eval_utterances` held-out labelled utterances.
/// Each utterance uses its own RNG stream, so the result does not depend on
/// the execution mode.
pub fn generate_corpus(
    cfg: &CorpusConfig,
    n_utterances: usize,
    labelled_fraction: f64,
    exec: Exec,
) -> Result<Corpus, DataError> {
    cfg.validate()?;
    if n_utterances < 1 {
        return Err(DataError::Config("n_utterances must be >= 1".into()));
    }
    if !(labelled_fraction > 0.0 && labelled_fraction <= 1.0) {
        return Err(DataError::Config("labelled_fraction must be in (0, 1]".into()));
    }
    let patterns = Patterns::new(cfg);
    let n_lab = ((n_utterances as f64 * labelled_fraction).round() as usize).clamp(1, n_utterances);
    let train = exec.map_range(n_utterances, |i| utterance(cfg, &patterns, TRAIN_STREAM, i));
    let eval = exec.map_range(cfg.eval_utterances, |i| utterance(cfg, &patterns, EVAL_STREAM, i));
    let mut labelled = train;
    let unlabelled = labelled.split_off(n_lab).iter().map(|s| s.without_labels()).collect();
    Ok(Corpus {
        config: cfg.clone(),
        labelled,
        unlabelled,
        eval,
    })
}
