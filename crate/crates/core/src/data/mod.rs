//! Synthetic "talking symbols" corpus.
//!
//! Every utterance is a random token sequence rendered into two aligned
//! views: a low-rate, noisy video-like stream and an `r`-times faster,
//! cleaner audio-like stream. Video patterns are grouped into look-alike
//! clusters (the analogue of visemes), which keeps the visual task harder
//! than the auditory one.

mod augment;
mod corpus;
pub mod io;
mod tokenizer;

pub use augment::{corrupt_audio, sample_window_span, zero_mask_augment, AugmentConfig};
pub use corpus::{generate_corpus, render_views, Corpus, CorpusConfig, Patterns};
pub use tokenizer::{Tokenizer, Vocab};

use crate::autodiff::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid corpus config: {0}")]
    Config(String),
    #[error("unknown character {0:?}")]
    UnknownChar(char),
    #[error("token id {0} is not a content token")]
    BadToken(usize),
    #[error("audio signal has zero power")]
    ZeroPower,
    #[error("corpus file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Paired views of one utterance; `audio` has exactly `ratio · video` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct Views {
    /// `[T_v, video_dim]`
    pub video: Tensor<f32>,
    /// `[r·T_v, audio_dim]`
    pub audio: Tensor<f32>,
}

impl Views {
    pub fn video_frames(&self) -> usize {
        self.video.shape()[0]
    }

    pub fn audio_frames(&self) -> usize {
        self.audio.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSample {
    pub id: u64,
    pub views: Views,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnlabelledSample {
    pub id: u64,
    pub views: Views,
}

impl LabelledSample {
    pub fn without_labels(&self) -> UnlabelledSample {
        UnlabelledSample {
            id: self.id,
            views: self.views.clone(),
        }
    }
}
