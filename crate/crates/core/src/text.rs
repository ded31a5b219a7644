//! Tokenization and the stop-word / numeric filters shared by the lexical and
//! semantic channels.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

const ENGLISH_STOPWORDS: &str = include_str!("../data/stopwords_en.txt");

/// Lowercases `text` and splits it on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_lowercase)
}

/// A token is numeric when it contains no letters, so digits with
/// punctuation ("3.14", "1,200", "#42") count as numeric and mixed codes such
/// as "A123" do not.
pub fn is_numeric_token(token: &str) -> bool {
    !token.chars().any(char::is_alphabetic)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopWords {
    words: HashSet<String>,
}

impl StopWords {
    /// The bundled English list.
    pub fn english() -> Self {
        Self::parse(ENGLISH_STOPWORDS)
    }

    /// One token per line, `#` comments allowed. Tokens are lowercased.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { words }
    }

    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        Self {
            words: words.into_iter().map(|w| w.as_ref().to_lowercase()).collect(),
        }
    }

    /// `token` must already be lowercase.
    pub fn contains(&self, token: &str) -> bool {
        self.words.contains(token)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Default for StopWords {
    fn default() -> Self {
        Self::english()
    }
}

/// Content-bearing word tokens of a text: tokenized, minus stop-words and
/// numeric tokens.
pub fn content_tokens(text: &str, stopwords: &StopWords) -> BTreeSet<String> {
    tokenize(text)
        .filter(|t| !stopwords.contains(t) && !is_numeric_token(t))
        .collect()
}
