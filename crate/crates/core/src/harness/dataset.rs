//! JSON-lines ranking data: one `{query, items, labels}` object per line.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenSequence, Vocabulary};

/// One line of a dataset file, before tokenization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawInstance {
    pub query: String,
    pub items: Vec<String>,
    pub labels: Vec<f64>,
}

impl RawInstance {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.items.is_empty() {
            return Err("no items".into());
        }
        if self.items.len() != self.labels.len() {
            return Err(format!("{} items but {} labels", self.items.len(), self.labels.len()));
        }
        if let Some((j, y)) = self.labels.iter().enumerate().find(|(_, y)| !(0.0..=1.0).contains(*y)) {
            return Err(format!("label {j} = {y} outside [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankingInstance {
    pub query: TokenSequence,
    pub items: Vec<TokenSequence>,
    pub targets: Vec<f64>,
}

impl RankingInstance {
    pub fn from_raw(raw: &RawInstance, vocab: &Vocabulary) -> Result<Self> {
        raw.validate().map_err(Error::Invalid)?;
        Ok(RankingInstance {
            query: vocab.tokenize(&raw.query),
            items: raw.items.iter().map(|t| vocab.tokenize(t)).collect(),
            targets: raw.labels.clone(),
        })
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    /// First `n` items and their targets.
    pub fn truncated(&self, n: usize) -> RankingInstance {
        let n = n.min(self.items.len());
        RankingInstance {
            query: self.query.clone(),
            items: self.items[..n].to_vec(),
            targets: self.targets[..n].to_vec(),
        }
    }
}

/// Parse every non-blank line; the first malformed line aborts the load
/// with its 1-based line number.
pub fn read_raw(path: impl AsRef<Path>) -> Result<Vec<RawInstance>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| Error::BadLine { line: i + 1, reason };
        let raw: RawInstance = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
        raw.validate().map_err(bad)?;
        out.push(raw);
    }
    if out.is_empty() {
        log::warn!("{} holds no instances", path.display());
    }
    Ok(out)
}

pub fn load_dataset(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<RankingInstance>> {
    read_raw(path)?.iter().map(|r| RankingInstance::from_raw(r, vocab)).collect()
}

pub fn write_raw(path: impl AsRef<Path>, data: &[RawInstance]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for inst in data {
        serde_json::to_writer(&mut w, inst)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Every query and item text, for vocabulary building.
pub fn corpus_texts(data: &[RawInstance]) -> Vec<&str> {
    data.iter().flat_map(|r| std::iter::once(r.query.as_str()).chain(r.items.iter().map(String::as_str))).collect()
}
