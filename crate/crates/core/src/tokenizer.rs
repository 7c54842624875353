//! Word-level tokenizer with a frequency-built vocabulary.
//!
//! Normalization is lowercase, ASCII punctuation removed, whitespace split.
//! Ids 0..4 are reserved for `[PAD]`, `[UNK]`, `[CLS]`, `[SEP]`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::Result;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    /// Non-reserved terms; `terms[i]` has id `i + 4`.
    terms: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub source: String,
}

impl TokenSequence {
    pub fn from_ids(ids: Vec<TokenId>) -> Self {
        TokenSequence { ids, source: String::new() }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Lowercased, punctuation-free terms of `text`.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| w.chars().filter(|c| !c.is_ascii_punctuation()).flat_map(char::to_lowercase).collect::<String>())
        .filter(|w| !w.is_empty())
        .collect()
}

impl Vocabulary {
    /// Reserved ids only.
    pub fn empty() -> Self {
        Self::from_terms(Vec::new())
    }

    fn from_terms(terms: Vec<String>) -> Self {
        let index = terms.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId + 4)).collect();
        Vocabulary { terms, index }
    }

    /// Keep the `max_size - 4` most frequent terms, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[S], max_size: usize) -> Self {
        assert!(max_size >= 5, "vocabulary max size must be at least 5");
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for term in normalize(text.as_ref()) {
                *counts.entry(term).or_default() += 1;
            }
        }
        for r in RESERVED {
            counts.remove(&r.to_lowercase());
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - RESERVED.len());
        Self::from_terms(ranked.into_iter().map(|(t, _)| t).collect())
    }

    pub fn len(&self) -> usize {
        self.terms.len() + RESERVED.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, term: &str) -> TokenId {
        self.index.get(term).copied().unwrap_or(UNK)
    }

    pub fn term(&self, id: TokenId) -> Option<&str> {
        match id as usize {
            i if i < RESERVED.len() => Some(RESERVED[i]),
            i => self.terms.get(i - RESERVED.len()).map(String::as_str),
        }
    }

    /// Non-reserved terms in id order.
    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn tokenize(&self, text: &str) -> TokenSequence {
        let ids = normalize(text).iter().map(|t| self.id(t)).collect();
        TokenSequence { ids, source: text.to_string() }
    }

    /// One term per line; line `i` holds id `i + 4`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for t in &self.terms {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(Self::from_lines(text.lines()))
    }

    pub fn from_lines<'a>(lines: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_terms(lines.into_iter().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_exhaustive_small_vocab() {
        let v = Vocabulary::build(&["a b", "b c"], 7);
        assert_eq!(v.len(), 7);
        // b is most frequent, then a and c lexicographically
        assert_eq!(v.terms(), &["b", "a", "c"]);
    }

    #[test]
    fn frequency_cut() {
        let v = Vocabulary::build(&["x x x", "y"], 5);
        assert_eq!(v.terms(), &["x"]);
        assert_eq!(v.id("y"), UNK);
    }

    #[test]
    fn empty_corpus_reserved_only() {
        let v = Vocabulary::build::<&str>(&[], 10);
        assert_eq!(v.len(), 4);
        assert_eq!(v.term(CLS), Some("[CLS]"));
    }

    #[test]
    fn tokenize_examples() {
        let v = Vocabulary::build(&["foods of oaxaca"], 10);
        let t = v.tokenize("Foods of Oaxaca");
        assert_eq!(t.ids, vec![v.id("foods"), v.id("of"), v.id("oaxaca")]);
        assert_eq!(v.tokenize("zzz").ids, vec![UNK]);
        let v = Vocabulary::build(&["a"], 5);
        assert_eq!(v.tokenize("a  a").ids, vec![v.id("a"); 2]);
        assert!(v.tokenize("   ").is_empty());
    }

    #[test]
    fn punctuation_and_case() {
        assert_eq!(normalize("Hello, World! it's  ok..."), vec!["hello", "world", "its", "ok"]);
        assert!(normalize("?!").is_empty());
    }

    #[test]
    fn file_round_trip() {
        let v = Vocabulary::build(&["the cat sat", "the dog"], 16);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
