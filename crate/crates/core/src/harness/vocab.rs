//! Fixed word-level vocabulary for the synthetic question templates.

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

pub const COLOR_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "cyan", "magenta"];

const WORDS: &[&str] = &[
    "<pad>", "<bos>", "<eos>", //
    "how", "many", "objects", "is", "any", "object", "the", "count", "yes", "no", //
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", //
    "red", "green", "blue", "yellow", "cyan", "magenta",
];

#[derive(Debug, Clone, Copy, Default)]
pub struct Vocab;

impl Vocab {
    pub fn size(&self) -> usize {
        WORDS.len()
    }

    pub fn id(&self, word: &str) -> Result<usize> {
        WORDS
            .iter()
            .position(|w| *w == word)
            .ok_or_else(|| Error::UnknownWord(word.to_string()))
    }

    pub fn word(&self, id: usize) -> Result<&'static str> {
        WORDS
            .get(id)
            .copied()
            .ok_or(Error::TokenOutOfRange { id, vocab: WORDS.len() })
    }

    /// Whitespace tokenization, case-insensitive, trailing `?` and `.` dropped.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.split_whitespace()
            .map(|w| w.trim_end_matches(['?', '.']).to_ascii_lowercase())
            .filter(|w| !w.is_empty())
            .map(|w| self.id(&w))
            .collect()
    }

    /// Inverse of [`encode`](Self::encode); the end-of-answer marker is dropped.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let words = ids
            .iter()
            .filter(|&&i| i != EOS)
            .map(|&i| self.word(i))
            .collect::<Result<Vec<_>>>()?;
        Ok(words.join(" "))
    }

    pub fn digit(&self, n: usize) -> usize {
        self.id(&n.to_string()).expect("digits 0-9 are in the vocabulary")
    }

    pub fn color(&self, c: usize) -> usize {
        self.id(COLOR_NAMES[c]).expect("palette colors are in the vocabulary")
    }

    pub fn yes_no(&self, b: bool) -> usize {
        self.id(if b { "yes" } else { "no" })
            .expect("yes/no are in the vocabulary")
    }
}
