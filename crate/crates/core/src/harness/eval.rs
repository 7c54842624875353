//! Score a dataset with a trained model and compute ranking metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::dataset::RankingInstance;
use crate::metrics::MetricsReport;
use crate::ranker::{rank, Model, ScoreVector};
use crate::tensor::graph::sigmoid;
use crate::tokenizer::TokenSequence;

/// Targets at or above this count as relevant.
pub const RELEVANCE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    pub max_union: usize,
    pub reinjection: bool,
    /// Also score every pair on its own.
    pub pointwise: bool,
    /// Sort each item's tokens before pointwise scoring.
    pub sorted_tokens: bool,
    /// Fraction of positives kept above the accuracy threshold.
    pub retain: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { ks: vec![1, 3, 5, 10], max_union: 128, reinjection: false, pointwise: false, sorted_tokens: false, retain: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: usize,
    pub item_ids: Vec<usize>,
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    /// Item ids, best first.
    pub rank: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruncationReport {
    /// Queries whose union exceeded the budget.
    pub queries_truncated: usize,
    /// Distinct item tokens dropped, summed over items.
    pub tokens_dropped: usize,
    /// Items left with no union token at all.
    pub items_fully_truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub joint: MetricsReport,
    pub pointwise: Option<MetricsReport>,
    pub truncation: TruncationReport,
    pub records: Vec<QueryRecord>,
    pub pointwise_records: Option<Vec<QueryRecord>>,
}

/// How per-item probabilities are read off the logits for the pooled
/// AUC and accuracy figures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreMap {
    /// Softmax across the query's items.
    Softmax,
    /// Independent logistic per item.
    Sigmoid,
}

/// Metrics and per-query records for externally supplied logits.
pub fn metrics_from_logits(
    dataset: &[RankingInstance],
    logits: &[Vec<f64>],
    map: ScoreMap,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<QueryRecord>)> {
    if dataset.len() != logits.len() {
        return Err(Error::Invalid(format!("{} logit vectors for {} queries", logits.len(), dataset.len())));
    }
    let mut ranked = Vec::with_capacity(dataset.len());
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    let mut records = Vec::with_capacity(dataset.len());
    for (qi, (inst, f)) in dataset.iter().zip(logits).enumerate() {
        if f.len() != inst.n_items() {
            return Err(Error::Invalid(format!("query {qi}: {} logits for {} items", f.len(), inst.n_items())));
        }
        let scores = match map {
            ScoreMap::Softmax => ScoreVector::from_logits(f.clone()).scores,
            ScoreMap::Sigmoid => f.iter().map(|&v| sigmoid(v)).collect(),
        };
        let order = rank(f);
        let relevant: Vec<bool> = inst.targets.iter().map(|&y| y >= RELEVANCE_THRESHOLD).collect();
        ranked.push(order.iter().map(|&j| relevant[j]).collect::<Vec<_>>());
        pooled_scores.extend_from_slice(&scores);
        pooled_labels.extend_from_slice(&relevant);
        records.push(QueryRecord { query_id: qi, item_ids: (0..f.len()).collect(), logits: f.clone(), scores, rank: order });
    }
    let report = MetricsReport::compute(&ranked, &pooled_scores, &pooled_labels, &opts.ks, opts.retain)?;
    Ok((report, records))
}

fn sorted(seq: &TokenSequence) -> TokenSequence {
    let mut s = seq.clone();
    s.ids.sort_unstable();
    s
}

pub fn evaluate(model: &Model, dataset: &[RankingInstance], opts: &EvalOptions) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty dataset".into()));
    }
    let joint: Vec<(Vec<f64>, Vec<usize>)> = dataset
        .par_iter()
        .map(|inst| {
            let s = model.score_joint(&inst.query, &inst.items, opts.max_union, opts.reinjection)?;
            Ok((s.scores.logits, s.union.truncated.clone()))
        })
        .collect::<Result<_>>()?;

    let mut truncation = TruncationReport::default();
    for (_, t) in &joint {
        let dropped: usize = t.iter().sum();
        truncation.queries_truncated += usize::from(dropped > 0);
        truncation.tokens_dropped += dropped;
    }
    for inst in dataset {
        // items whose every token was cut from the union
        let union = crate::union::build_union(&inst.items, &inst.query, opts.max_union)?;
        truncation.items_fully_truncated +=
            union.fully_truncated() - inst.items.iter().filter(|i| i.is_empty()).count();
    }
    if truncation.queries_truncated > 0 {
        log::warn!(
            "union budget {} truncated {} queries ({} item tokens dropped)",
            opts.max_union,
            truncation.queries_truncated,
            truncation.tokens_dropped
        );
    }

    let logits: Vec<Vec<f64>> = joint.into_iter().map(|j| j.0).collect();
    let (joint_report, records) = metrics_from_logits(dataset, &logits, ScoreMap::Softmax, opts)?;

    let (pointwise, pointwise_records) = if opts.pointwise {
        let logits: Vec<Vec<f64>> = dataset
            .par_iter()
            .map(|inst| {
                inst.items
                    .iter()
                    .map(|it| {
                        let it = if opts.sorted_tokens { sorted(it) } else { it.clone() };
                        Ok(model.pointwise_score(&inst.query, &it)?.logit)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;
        let (r, rec) = metrics_from_logits(dataset, &logits, ScoreMap::Sigmoid, opts)?;
        (Some(r), Some(rec))
    } else {
        (None, None)
    };

    Ok(EvalReport { joint: joint_report, pointwise, truncation, records, pointwise_records })
}
