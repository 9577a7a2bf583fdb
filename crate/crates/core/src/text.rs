//! Word-token sequences for target texts and transcripts.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// One whitespace-free, lowercase token. Punctuation tokens are kept so that
/// texts can be re-rendered, but they never count as words.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct WordToken {
    text: String,
    is_punctuation: bool,
}

impl WordToken {
    /// Returns `None` for empty input or input containing whitespace.
    pub fn new(text: &str, is_punctuation: bool) -> Option<Self> {
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return None;
        }
        Some(Self {
            text: text.to_lowercase(),
            is_punctuation,
        })
    }

    pub fn word(text: &str) -> Option<Self> {
        Self::new(text, false)
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn is_punctuation(&self) -> bool {
        self.is_punctuation
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

/// Ordered tokens of a sentence.
#[derive(Clone, Default, PartialEq, Eq, Hash)]
pub struct TextSequence {
    tokens: Vec<WordToken>,
}

impl TextSequence {
    pub fn new(tokens: Vec<WordToken>) -> Self {
        Self { tokens }
    }

    /// Splits on whitespace, lowercases, and peels leading and trailing
    /// punctuation off each chunk into separate punctuation tokens.
    pub fn parse(text: &str) -> Self {
        let mut tokens = Vec::new();
        for chunk in text.split_whitespace() {
            let Some(first) = chunk.find(is_word_char) else {
                tokens.extend(WordToken::new(chunk, true));
                continue;
            };
            // rfind returns a byte offset of the last word char's start
            let last = chunk.rfind(is_word_char).unwrap_or(first);
            let last_end = last + chunk[last..].chars().next().map_or(1, char::len_utf8);
            if first > 0 {
                tokens.extend(WordToken::new(&chunk[..first], true));
            }
            tokens.extend(WordToken::new(&chunk[first..last_end], false));
            if last_end < chunk.len() {
                tokens.extend(WordToken::new(&chunk[last_end..], true));
            }
        }
        Self { tokens }
    }

    pub fn from_words<'a, I: IntoIterator<Item = &'a str>>(words: I) -> Self {
        Self {
            tokens: words.into_iter().filter_map(WordToken::word).collect(),
        }
    }

    pub fn tokens(&self) -> &[WordToken] {
        &self.tokens
    }

    pub fn push(&mut self, token: WordToken) {
        self.tokens.push(token);
    }

    /// Non-punctuation tokens, in order.
    pub fn words(&self) -> impl Iterator<Item = &str> + '_ {
        self.tokens
            .iter()
            .filter(|t| !t.is_punctuation)
            .map(|t| t.text.as_str())
    }

    pub fn word_vec(&self) -> Vec<&str> {
        self.words().collect()
    }

    pub fn word_count(&self) -> usize {
        self.tokens.iter().filter(|t| !t.is_punctuation).count()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The same sequence with punctuation removed.
    pub fn without_punctuation(&self) -> TextSequence {
        Self {
            tokens: self
                .tokens
                .iter()
                .filter(|t| !t.is_punctuation)
                .cloned()
                .collect(),
        }
    }
}

impl fmt::Display for TextSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, t) in self.tokens.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            f.write_str(&t.text)?;
        }
        Ok(())
    }
}

impl fmt::Debug for TextSequence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.to_string())
    }
}

impl Serialize for TextSequence {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TextSequence {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        Ok(Self::parse(&s))
    }
}
