use serde::{Deserialize, Serialize};

use super::DataError;

const ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz0123456789";

/// Id layout: content tokens `0..content`, then blank, sos, eos, pad.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub content: usize,
}

impl Vocab {
    pub const RESERVED: usize = 4;

    pub fn new(content: usize) -> Self {
        Self { content }
    }

    pub fn blank(&self) -> usize {
        self.content
    }

    pub fn sos(&self) -> usize {
        self.content + 1
    }

    pub fn eos(&self) -> usize {
        self.content + 2
    }

    pub fn pad(&self) -> usize {
        self.content + 3
    }

    pub fn total(&self) -> usize {
        self.content + Self::RESERVED
    }

    pub fn is_content(&self, id: usize) -> bool {
        id < self.content
    }

    pub fn max_content() -> usize {
        ALPHABET.chars().count()
    }
}

/// Character-level tokenizer over the first `vocab.content` alphabet symbols.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vocab,
    chars: Vec<char>,
}

impl Tokenizer {
    pub fn new(vocab: Vocab) -> Result<Self, DataError> {
        if vocab.content == 0 || vocab.content > Vocab::max_content() {
            return Err(DataError::Config(format!(
                "vocab_size must be in 1..={}",
                Vocab::max_content()
            )));
        }
        Ok(Self {
            vocab,
            chars: ALPHABET.chars().take(vocab.content).collect(),
        })
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>, DataError> {
        text.chars()
            .map(|c| {
                self.chars
                    .iter()
                    .position(|&a| a == c)
                    .ok_or(DataError::UnknownChar(c))
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> Result<String, DataError> {
        ids.iter()
            .map(|&i| self.chars.get(i).copied().ok_or(DataError::BadToken(i)))
            .collect()
    }

    /// Lossy rendering for reports: reserved ids become `<blank>` etc.
    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| match self.chars.get(i) {
                Some(c) => c.to_string(),
                None if i == self.vocab.blank() => "<blank>".into(),
                None if i == self.vocab.sos() => "<sos>".into(),
                None if i == self.vocab.eos() => "<eos>".into(),
                None => "<pad>".into(),
            })
            .collect()
    }
}
