//! Closed-vocabulary prompts.

use crate::error::{Error, Result};

pub const PAD: usize = 0;

/// Content words, indexed by token id. Id 0 is the pad token.
pub const WORDS: &[&str] = &[
    "<pad>", "black", "white", "red", "yellow", "green", "cyan", "blue", "magenta", "gray",
    "orange", "circle", "square", "triangle", "figure", "border",
];

/// Grammar words that carry no token.
pub const FILLER: &[&str] = &["a", "an", "and", "on", "the", "with", "background"];

pub fn word_id(word: &str) -> Option<usize> {
    WORDS.iter().position(|w| *w == word).filter(|&i| i != PAD)
}

/// A fixed-length token sequence, right-padded with [`PAD`].
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextPrompt {
    ids: Vec<usize>,
}

impl TextPrompt {
    pub fn new(ids: Vec<usize>, n_tokens: usize, vocab: usize) -> Result<Self> {
        if ids.len() != n_tokens {
            return Err(Error::Validation(format!(
                "prompt has {} tokens, expected {n_tokens}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Validation(format!("token id {bad} ≥ vocabulary size {vocab}")));
        }
        Ok(Self { ids })
    }

    /// The all-pad prompt used for unconditional prediction.
    pub fn empty(n_tokens: usize) -> Self {
        Self {
            ids: vec![PAD; n_tokens],
        }
    }

    /// Tokenizes grammar text, dropping filler words and padding to `n_tokens`.
    pub fn parse(text: &str, n_tokens: usize) -> Result<Self> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            let w = word.to_ascii_lowercase();
            if FILLER.contains(&w.as_str()) {
                continue;
            }
            let id = word_id(&w)
                .ok_or_else(|| Error::Validation(format!("word {word:?} is not in the vocabulary")))?;
            ids.push(id);
        }
        if ids.len() > n_tokens {
            return Err(Error::Validation(format!(
                "prompt needs {} tokens, only {n_tokens} slots",
                ids.len()
            )));
        }
        ids.resize(n_tokens, PAD);
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn is_unconditional(&self) -> bool {
        self.ids.iter().all(|&i| i == PAD)
    }

    /// Space-separated content words (pads omitted).
    pub fn words(&self) -> String {
        self.ids
            .iter()
            .filter(|&&i| i != PAD)
            .map(|&i| WORDS.get(i).copied().unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_drops_filler_and_pads() {
        let p = TextPrompt::parse("a red circle and a figure on a black background", 8).unwrap();
        assert_eq!(p.ids(), &[3, 11, 14, 1, 0, 0, 0, 0]);
        assert_eq!(p.words(), "red circle figure black");
    }

    #[test]
    fn unknown_word_is_validation_error() {
        assert!(matches!(
            TextPrompt::parse("a purple circle", 8),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn length_and_vocab_checked() {
        assert!(TextPrompt::new(vec![1, 2], 3, 64).is_err());
        assert!(TextPrompt::new(vec![1, 2, 99], 3, 64).is_err());
        assert!(TextPrompt::parse("red red red red red red red red red", 8).is_err());
    }
}
