//! Desk-scale multi-task "speech" model: tone-chip audio in, symbol tokens
//! out, with a transcribe task (source alphabet) and a translate task
//! (bijectively mapped target alphabet).

mod data;
mod frontend;
mod model;
mod nn;
mod train;

pub use data::{
    generate_synthetic_dataset, source_text, synthesize, target_text, SyntheticSpec,
    SyntheticUtterance, MAX_SYMBOLS, MIN_SYMBOLS,
};
pub use frontend::{FrontEnd, FrontEndConfig};
pub use model::{ToyModel, ToyModelConfig};
pub use train::{train_toy_model, TrainCheck, TrainReport};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::TaskTag;

#[derive(Debug, Error)]
pub enum ToyError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("invalid toy model config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("utterance {id}: {reason}")]
    BadUtterance { id: String, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint serialization: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io error on {0}: {1}")]
    Io(String, #[source] std::io::Error),
}

/// Vocabulary layout: five specials, then the source alphabet, then the
/// target alphabet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    alphabet: usize,
}

impl Vocab {
    pub const START: u32 = 0;
    pub const LANG: u32 = 1;
    pub const TRANSCRIBE: u32 = 2;
    pub const TRANSLATE: u32 = 3;
    pub const END: u32 = 4;
    const SPECIALS: u32 = 5;

    pub fn new(alphabet: usize) -> Self {
        Self { alphabet }
    }

    pub fn size(&self) -> usize {
        Self::SPECIALS as usize + 2 * self.alphabet
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet
    }

    pub fn task_token(&self, task: TaskTag) -> u32 {
        match task {
            TaskTag::Transcribe => Self::TRANSCRIBE,
            TaskTag::Translate => Self::TRANSLATE,
        }
    }

    pub fn source(&self, symbol: usize) -> u32 {
        assert!(symbol < self.alphabet);
        Self::SPECIALS + symbol as u32
    }

    pub fn target(&self, symbol: usize) -> u32 {
        assert!(symbol < self.alphabet);
        Self::SPECIALS + (self.alphabet + symbol) as u32
    }

    pub fn is_target(&self, token: u32) -> bool {
        let lo = Self::SPECIALS as usize + self.alphabet;
        (lo..lo + self.alphabet).contains(&(token as usize))
    }

    /// Token ids for a symbol sequence under the given task, end-terminated.
    pub fn encode(&self, symbols: &[usize], task: TaskTag) -> Vec<u32> {
        let mut v: Vec<u32> = symbols
            .iter()
            .map(|&s| match task {
                TaskTag::Transcribe => self.source(s),
                TaskTag::Translate => self.target(s),
            })
            .collect();
        v.push(Self::END);
        v
    }

    pub fn word(&self, token: u32) -> Option<String> {
        let t = token as usize;
        let base = Self::SPECIALS as usize;
        if t < base || t >= self.size() {
            None
        } else if t < base + self.alphabet {
            Some(format!("s{}", t - base))
        } else {
            Some(format!("t{}", t - base - self.alphabet))
        }
    }

    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter_map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Inverse of [`source_text`] / [`target_text`]: symbol indices of a
    /// rendered text in one alphabet.
    pub fn parse_symbols(&self, text: &str, prefix: char) -> Option<Vec<usize>> {
        text.split_whitespace()
            .map(|w| {
                let rest = w.strip_prefix(prefix)?;
                let k: usize = rest.parse().ok()?;
                (k < self.alphabet).then_some(k)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_layout_has_both_alphabets_and_specials() {
        let v = Vocab::new(10);
        assert_eq!(v.size(), 25);
        assert_eq!(v.source(0), 5);
        assert_eq!(v.target(9), 24);
        assert!(v.is_target(15) && !v.is_target(14) && !v.is_target(25));
        assert_eq!(v.render(&[0, 1, 2, 5, 15, 4]), "s0 t0");
        assert_eq!(
            v.encode(&[1, 4, 7], TaskTag::Translate),
            vec![16, 19, 22, 4]
        );
        assert_eq!(v.parse_symbols("t3 t9", 't'), Some(vec![3, 9]));
        assert_eq!(v.parse_symbols("t3 s9", 't'), None);
        assert_eq!(source_text(&[2, 5]), "s2 s5");
    }
}
