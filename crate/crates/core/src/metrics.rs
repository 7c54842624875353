//! Ranking and classification metrics.
//!
//! Ranking metrics take, per query, the binary relevance flags of the items
//! in ranked order (best first).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A metric averaged over queries plus the number of queries left out.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub value: f64,
    pub skipped: usize,
}

fn relevant_count(flags: &[bool]) -> usize {
    flags.iter().filter(|&&f| f).count()
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("cutoff K must be at least 1".into()));
    }
    Ok(())
}

fn mean_over<F>(queries: &[Vec<bool>], per_query: F) -> Averaged
where
    F: Fn(&[bool]) -> Option<f64>,
{
    let mut total = 0.0;
    let mut used = 0usize;
    for q in queries {
        if let Some(v) = per_query(q) {
            total += v;
            used += 1;
        }
    }
    let value = if used == 0 { 0.0 } else { total / used as f64 };
    Averaged { value, skipped: queries.len() - used }
}

/// Mean reciprocal rank of the first relevant item within the top `k`.
/// Queries without any relevant item are skipped.
pub fn mrr_at_k(queries: &[Vec<bool>], k: usize) -> Result<Averaged> {
    check_k(k)?;
    if queries.is_empty() {
        return Err(Error::Invalid("mrr over an empty query set".into()));
    }
    Ok(mean_over(queries, |flags| {
        if relevant_count(flags) == 0 {
            return None;
        }
        Some(flags.iter().take(k).position(|&f| f).map_or(0.0, |p| 1.0 / (p + 1) as f64))
    }))
}

/// Average precision truncated at `k` for one query, normalized by the
/// total number of relevant items `m`. `None` when `m = 0`.
pub fn average_precision(flags: &[bool], k: usize) -> Option<f64> {
    let m = relevant_count(flags);
    if m == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &f) in flags.iter().take(k).enumerate() {
        if f {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / m as f64)
}

pub fn map_at_k(queries: &[Vec<bool>], k: usize) -> Result<Averaged> {
    check_k(k)?;
    Ok(mean_over(queries, |flags| average_precision(flags, k)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    /// Queries left out of recall (no relevant items).
    pub recall_skipped: usize,
}

/// `P@K = hits / K` over every query; `R@K = hits / m` over queries with `m > 0`.
pub fn precision_recall_at_k(queries: &[Vec<bool>], k: usize) -> Result<PrecisionRecall> {
    check_k(k)?;
    if queries.is_empty() {
        return Err(Error::Invalid("precision/recall over an empty query set".into()));
    }
    let hits = |flags: &[bool]| relevant_count(&flags[..flags.len().min(k)]);
    let precision = mean_over(queries, |f| Some(hits(f) as f64 / k as f64));
    let recall = mean_over(queries, |f| {
        let m = relevant_count(f);
        (m > 0).then(|| hits(f) as f64 / m as f64)
    });
    Ok(PrecisionRecall { precision: precision.value, recall: recall.value, recall_skipped: recall.skipped })
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (rank-sum form).
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = relevant_count(labels);
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("auc needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average 1-based ranks over tie groups
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum_pos += avg * order[i..=j].iter().filter(|&&o| labels[o]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAccuracy {
    pub threshold: f64,
    /// Fraction of negatives scored below the threshold; `None` without negatives.
    pub negative: Option<f64>,
    /// Fraction classified correctly (positive iff score >= threshold).
    pub overall: f64,
}

pub fn accuracy_at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdAccuracy> {
    if !threshold.is_finite() {
        return Err(Error::Invalid("threshold must be finite".into()));
    }
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let mut neg = 0usize;
    let mut neg_ok = 0usize;
    let mut correct = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        if !l {
            neg += 1;
            if !predicted {
                neg_ok += 1;
            }
        }
        if predicted == l {
            correct += 1;
        }
    }
    Ok(ThresholdAccuracy {
        threshold,
        negative: (neg > 0).then(|| neg_ok as f64 / neg as f64),
        overall: correct as f64 / scores.len() as f64,
    })
}

/// Largest threshold keeping at least `fraction` of the positives at or
/// above it.
pub fn retention_threshold(scores: &[f64], labels: &[bool], fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(format!("retention fraction {fraction} outside (0, 1]")));
    }
    let mut pos: Vec<f64> = scores.iter().zip(labels).filter(|(_, &l)| l).map(|(&s, _)| s).collect();
    if pos.is_empty() {
        return Err(Error::Invalid("no positives to retain".into()));
    }
    pos.sort_by(|a, b| b.total_cmp(a));
    let keep = ((fraction * pos.len() as f64).ceil() as usize).clamp(1, pos.len());
    Ok(pos[keep - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub map: f64,
    pub mrr: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub queries: usize,
    /// Queries without a relevant item, left out of MAP/MRR/recall.
    pub skipped_queries: usize,
    pub at_k: Vec<AtK>,
    pub auc_roc: Option<f64>,
    pub accuracy: Option<ThresholdAccuracy>,
}

impl MetricsReport {
    /// Ranking metrics at every cutoff in `ks`, AUC over all pooled
    /// `(score, label)` pairs, and accuracies at the threshold retaining
    /// `retain` of the positives.
    pub fn compute(ranked: &[Vec<bool>], scores: &[f64], labels: &[bool], ks: &[usize], retain: f64) -> Result<Self> {
        let mut at_k = Vec::with_capacity(ks.len());
        let mut skipped = 0;
        for &k in ks {
            let map = map_at_k(ranked, k)?;
            let mrr = mrr_at_k(ranked, k)?;
            let pr = precision_recall_at_k(ranked, k)?;
            skipped = map.skipped;
            at_k.push(AtK { k, map: map.value, mrr: mrr.value, precision: pr.precision, recall: pr.recall });
        }
        let auc = auc_roc(scores, labels).ok();
        let accuracy = match retention_threshold(scores, labels, retain) {
            Ok(t) => Some(accuracy_at_threshold(scores, labels, t)?),
            Err(_) => None,
        };
        Ok(MetricsReport { queries: ranked.len(), skipped_queries: skipped, at_k, auc_roc: auc, accuracy })
    }

    pub fn get(&self, k: usize) -> Option<&AtK> {
        self.at_k.iter().find(|a| a.k == k)
    }

    pub fn csv_header(&self) -> String {
        let mut cols = vec!["queries".to_string(), "skipped_queries".to_string()];
        for a in &self.at_k {
            for m in ["map", "mrr", "p", "r"] {
                cols.push(format!("{m}@{}", a.k));
            }
        }
        cols.extend(["auc_roc", "threshold", "negative_accuracy", "overall_accuracy"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut cols = vec![self.queries.to_string(), self.skipped_queries.to_string()];
        for a in &self.at_k {
            cols.extend([a.map, a.mrr, a.precision, a.recall].map(|v| v.to_string()));
        }
        cols.push(opt(self.auc_roc));
        cols.push(opt(self.accuracy.map(|a| a.threshold)));
        cols.push(opt(self.accuracy.and_then(|a| a.negative)));
        cols.push(opt(self.accuracy.map(|a| a.overall)));
        cols.join(",")
    }
}
