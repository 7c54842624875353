//! Synthetic ranking data with a planted token-overlap level and planted
//! relevance.
//!
//! Each query draws a private pool of `U` distinct words and lays its items
//! over the pool cyclically, item `j` taking `pool[(j L_k + i) mod U]`, so
//! the union is exactly the pool and `m / N_u = N L_k / U`. Overlap `o`
//! plants the ratio `1 + o (N - 1)`: `0` gives disjoint items, `1` gives
//! identical ones. The query is a subset of one relevant item's words.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::RawInstance;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_queries: usize,
    pub n_items: usize,
    pub item_len: usize,
    pub query_len: usize,
    /// Includes the four reserved ids.
    pub vocab_size: usize,
    pub overlap: f64,
    /// Reject specs whose items would not all be distinct.
    pub distinct_items: bool,
    /// Half-width of the uniform label noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_queries: 200,
            n_items: 10,
            item_len: 4,
            query_len: 2,
            vocab_size: 512,
            overlap: 0.2,
            distinct_items: false,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn planted_ratio(&self) -> f64 {
        1.0 + self.overlap * (self.n_items as f64 - 1.0)
    }

    /// Distinct words per query.
    pub fn pool_size(&self) -> usize {
        let total = self.n_items * self.item_len;
        ((total as f64 / self.planted_ratio()).round() as usize).clamp(self.item_len, total)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Invalid(format!("overlap {} outside [0, 1]", self.overlap)));
        }
        if self.n_queries == 0 || self.n_items == 0 || self.item_len == 0 || self.query_len == 0 {
            return Err(Error::Invalid("synthetic sizes must be positive".into()));
        }
        if self.query_len > self.item_len {
            return Err(Error::Invalid("query cannot be longer than an item".into()));
        }
        if !(0.0..0.1).contains(&self.noise) {
            return Err(Error::Invalid(format!("noise {} outside [0, 0.1)", self.noise)));
        }
        let words = self.vocab_size.saturating_sub(4);
        if self.pool_size() > words {
            return Err(Error::Invalid(format!("pool of {} words exceeds vocabulary of {words}", self.pool_size())));
        }
        if self.distinct_items && self.n_items > 1 {
            let u = self.pool_size();
            let starts: BTreeSet<usize> = (0..self.n_items).map(|j| j * self.item_len % u).collect();
            if u == self.item_len || starts.len() < self.n_items {
                return Err(Error::Invalid(format!(
                    "overlap {} leaves {} words for {} distinct items of length {}",
                    self.overlap, u, self.n_items, self.item_len
                )));
            }
        }
        Ok(())
    }
}

pub fn word(id: usize) -> String {
    format!("w{id}")
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<RawInstance>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let u = spec.pool_size();
    let mut out = Vec::with_capacity(spec.n_queries);
    for _ in 0..spec.n_queries {
        let pool = index::sample(&mut rng, spec.vocab_size - 4, u).into_vec();
        let items: Vec<Vec<usize>> = (0..spec.n_items)
            .map(|j| (0..spec.item_len).map(|i| pool[(j * spec.item_len + i) % u]).collect())
            .collect();
        let relevant = rng.random_range(0..spec.n_items);
        let mut query: Vec<usize> = index::sample(&mut rng, spec.item_len, spec.query_len)
            .into_iter()
            .map(|i| items[relevant][i])
            .collect();
        query.shuffle(&mut rng);

        let mut labels = Vec::with_capacity(spec.n_items);
        let mut texts = Vec::with_capacity(spec.n_items);
        for (j, item) in items.iter().enumerate() {
            let jitter = spec.noise * rng.random_range(-1.0..=1.0);
            let base = if j == relevant {
                0.9
            } else {
                let shared = query.iter().filter(|q| item.contains(q)).count();
                0.4 * shared as f64 / spec.query_len as f64
            };
            labels.push((base + jitter).clamp(0.0, 1.0));
            let mut words = item.clone();
            words.shuffle(&mut rng);
            texts.push(words.into_iter().map(word).collect::<Vec<_>>().join(" "));
        }
        out.push(RawInstance {
            query: query.into_iter().map(word).collect::<Vec<_>>().join(" "),
            items: texts,
            labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{corpus_texts, RankingInstance};
    use crate::tokenizer::Vocabulary;
    use crate::union::overlap_stats;

    fn measured_ratio(spec: &SynthSpec) -> f64 {
        let raw = synth_dataset(spec).unwrap();
        let vocab = Vocabulary::build(&corpus_texts(&raw), spec.vocab_size);
        let items: Vec<Vec<_>> =
            raw.iter().map(|r| RankingInstance::from_raw(r, &vocab).unwrap().items).collect();
        overlap_stats(&items, spec.item_len).unwrap().ratio
    }

    #[test]
    fn identical_and_disjoint_extremes() {
        let base = SynthSpec { n_queries: 20, n_items: 6, ..SynthSpec::default() };
        assert_eq!(measured_ratio(&SynthSpec { overlap: 1.0, ..base.clone() }), 6.0);
        assert_eq!(measured_ratio(&SynthSpec { overlap: 0.0, ..base }), 1.0);
    }

    #[test]
    fn planted_ratio_reproduced() {
        let spec = SynthSpec { n_queries: 40, n_items: 30, overlap: 0.8, vocab_size: 1024, ..SynthSpec::default() };
        let r = measured_ratio(&spec);
        assert!((r / spec.planted_ratio() - 1.0).abs() < 0.1, "{r} vs {}", spec.planted_ratio());
    }

    #[test]
    fn infeasible_specs_rejected() {
        let s = SynthSpec { overlap: 1.0, distinct_items: true, ..SynthSpec::default() };
        assert!(synth_dataset(&s).is_err());
        assert!(synth_dataset(&SynthSpec { overlap: 1.5, ..SynthSpec::default() }).is_err());
        assert!(synth_dataset(&SynthSpec { overlap: 0.0, vocab_size: 20, ..SynthSpec::default() }).is_err());
        assert!(synth_dataset(&SynthSpec { overlap: 0.0, distinct_items: true, ..SynthSpec::default() }).is_ok());
    }

    #[test]
    fn labels_plant_one_relevant_item() {
        let raw = synth_dataset(&SynthSpec { n_queries: 30, ..SynthSpec::default() }).unwrap();
        for r in &raw {
            assert_eq!(r.labels.iter().filter(|&&y| y >= 0.5).count(), 1);
            let rel = r.labels.iter().position(|&y| y >= 0.5).unwrap();
            let words: BTreeSet<&str> = r.items[rel].split(' ').collect();
            assert!(r.query.split(' ').all(|w| words.contains(w)));
        }
    }

    #[test]
    fn seeded() {
        let s = SynthSpec { n_queries: 5, ..SynthSpec::default() };
        assert_eq!(synth_dataset(&s).unwrap(), synth_dataset(&s).unwrap());
        assert_ne!(synth_dataset(&s).unwrap(), synth_dataset(&SynthSpec { seed: 1, ..s }).unwrap());
    }
}
