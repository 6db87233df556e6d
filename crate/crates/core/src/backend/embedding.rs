use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::BackendError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenKind {
    Bos,
    /// Token of the `n`-th word of the prompt.
    Word(usize),
    Eos,
    Pad,
}

/// Text embedding `tokens x dim` plus the token/word alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub text: String,
    pub words: Vec<String>,
    pub token_kinds: Vec<TokenKind>,
    pub vectors: Array2<f64>,
    pub is_unconditional: bool,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.token_kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_kinds.is_empty()
    }

    /// Token indices carrying word `word`.
    pub fn word_tokens(&self, word: usize) -> impl Iterator<Item = usize> + '_ {
        self.token_kinds.iter().enumerate().filter(move |(_, k)| **k == TokenKind::Word(word)).map(|(i, _)| i)
    }

    /// Number of non-padding tokens.
    pub fn content_len(&self) -> usize {
        self.token_kinds.iter().filter(|k| **k != TokenKind::Pad).count()
    }
}

/// Whitespace tokenizer with one token per word, wrapped in BOS/EOS and
/// padded to a fixed length so that cross-attention maps of different
/// prompts share a shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WordTokenizer {
    pub max_tokens: usize,
}

impl WordTokenizer {
    pub fn words(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect()
    }

    pub fn tokenize(&self, text: &str) -> Result<(Vec<String>, Vec<TokenKind>), BackendError> {
        let words = Self::words(text);
        if words.len() + 2 > self.max_tokens {
            return Err(BackendError::PromptTooLong { tokens: words.len() + 2, max: self.max_tokens });
        }
        let mut kinds = Vec::with_capacity(self.max_tokens);
        kinds.push(TokenKind::Bos);
        kinds.extend((0..words.len()).map(TokenKind::Word));
        kinds.push(TokenKind::Eos);
        kinds.resize(self.max_tokens, TokenKind::Pad);
        Ok((words, kinds))
    }
}
