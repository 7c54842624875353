//! Sorted token union over a query's items, per-item selection masks and
//! corpus-level overlap statistics.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tokenizer::{TokenId, TokenSequence};

#[derive(Debug, Clone, PartialEq)]
pub struct UnionEncoding {
    /// Sorted distinct ids, at most `L_u` of them.
    pub union_ids: Vec<TokenId>,
    pub query_len: usize,
    /// One mask per item of length `query_len + 1 + union_ids.len()`:
    /// query span, `[SEP]` slot, union span.
    pub item_masks: Vec<Vec<u8>>,
    /// `item_positions[j][m]` is the first position of `union_ids[m]` in
    /// item `j`, or `None` when item `j` does not contain it.
    pub item_positions: Vec<Vec<Option<usize>>>,
    /// Distinct tokens of each item that fell outside the `L_u` budget.
    pub truncated: Vec<usize>,
}

impl UnionEncoding {
    pub fn n_items(&self) -> usize {
        self.item_masks.len()
    }

    pub fn union_len(&self) -> usize {
        self.union_ids.len()
    }

    /// Union-span part of item `j`'s mask.
    pub fn union_span(&self, j: usize) -> &[u8] {
        &self.item_masks[j][self.query_len + 1..]
    }

    /// Number of items whose tokens all fell outside the union.
    pub fn fully_truncated(&self) -> usize {
        self.item_masks.iter().filter(|m| m[self.query_len + 1..].iter().all(|&b| b == 0)).count()
    }
}

/// Deduplicate, sort ascending by id and truncate to `max_union` ids, then
/// build every item's mask against the truncated union.
pub fn build_union(items: &[TokenSequence], query: &TokenSequence, max_union: usize) -> Result<UnionEncoding> {
    if items.is_empty() {
        return Err(Error::Invalid("build_union needs at least one item".into()));
    }
    if max_union == 0 {
        return Err(Error::Invalid("union budget must be at least 1".into()));
    }
    let all: BTreeSet<TokenId> = items.iter().flat_map(|it| it.ids.iter().copied()).collect();
    let union_ids: Vec<TokenId> = all.into_iter().take(max_union).collect();
    if union_ids.is_empty() {
        log::warn!("all {} items are empty; union has length 0", items.len());
    }

    let mut item_masks = Vec::with_capacity(items.len());
    let mut item_positions = Vec::with_capacity(items.len());
    let mut truncated = Vec::with_capacity(items.len());
    for item in items {
        let first = first_positions(&item.ids);
        item_masks.push(attention_mask_for_item(query, &union_ids, item));
        item_positions.push(union_ids.iter().map(|t| first.get(t).copied()).collect());
        let kept = union_ids.iter().filter(|t| first.contains_key(t)).count();
        truncated.push(first.len() - kept);
    }
    Ok(UnionEncoding { union_ids, query_len: query.len(), item_masks, item_positions, truncated })
}

fn first_positions(ids: &[TokenId]) -> BTreeMap<TokenId, usize> {
    let mut first = BTreeMap::new();
    for (p, &t) in ids.iter().enumerate() {
        first.entry(t).or_insert(p);
    }
    first
}

/// Ones over the query span and `[SEP]` slot; over the union span, one
/// exactly where the union token occurs in `item`.
pub fn attention_mask_for_item(query: &TokenSequence, union_ids: &[TokenId], item: &TokenSequence) -> Vec<u8> {
    let tokens: BTreeSet<TokenId> = item.ids.iter().copied().collect();
    let mut mask = vec![1u8; query.len() + 1];
    mask.extend(union_ids.iter().map(|t| u8::from(tokens.contains(t))));
    mask
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverlapStats {
    pub cap: usize,
    /// Mean over queries of the total (capped) item token count.
    pub mean_total_tokens: f64,
    /// Mean over queries of the union size.
    pub mean_union_size: f64,
    pub ratio: f64,
    pub skipped_queries: usize,
}

impl OverlapStats {
    pub const CSV_HEADER: &'static str = "L,m,N_u,ratio,skipped_queries";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.cap, self.mean_total_tokens, self.mean_union_size, self.ratio, self.skipped_queries
        )
    }
}

/// `m / N_u` token redundancy over queries given as lists of item token
/// sequences, each item capped at its first `cap` tokens.
pub fn overlap_stats<I>(queries: &[I], cap: usize) -> Result<OverlapStats>
where
    I: AsRef<[TokenSequence]>,
{
    if queries.is_empty() {
        return Err(Error::Invalid("overlap_stats needs a nonempty dataset".into()));
    }
    let mut total = 0.0;
    let mut union_total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for items in queries {
        let items = items.as_ref();
        if items.is_empty() {
            skipped += 1;
            continue;
        }
        let mut set = BTreeSet::new();
        let mut tokens = 0usize;
        for it in items {
            let capped = &it.ids[..it.ids.len().min(cap)];
            tokens += capped.len();
            set.extend(capped.iter().copied());
        }
        total += tokens as f64;
        union_total += set.len() as f64;
        counted += 1;
    }
    if counted == 0 {
        return Err(Error::Invalid("every query had zero items".into()));
    }
    let m = total / counted as f64;
    let nu = union_total / counted as f64;
    if nu == 0.0 {
        return Err(Error::Invalid("all items are empty after capping".into()));
    }
    Ok(OverlapStats { cap, mean_total_tokens: m, mean_union_size: nu, ratio: m / nu, skipped_queries: skipped })
}

/// `L_k * N / |T_U|`.
pub fn compression_factor(item_len: usize, n_items: usize, union_len: usize) -> Result<f64> {
    if union_len == 0 {
        return Err(Error::Invalid("compression factor undefined for an empty union".into()));
    }
    Ok((item_len * n_items) as f64 / union_len as f64)
}
