//! Measured matmul FLOPs and wall-clock of the joint path against one
//! pointwise pass per item.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::cost::cost_model;
use crate::harness::dataset::RankingInstance;
use crate::ranker::Model;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasuredCost {
    pub queries: usize,
    pub joint_flops: u64,
    pub pointwise_flops: u64,
    pub ratio: f64,
    pub joint_seconds: f64,
    pub pointwise_seconds: f64,
    /// Analytic totals from each instance's actual `L_q`, `L_k`, `N` and `C`.
    pub analytic_joint: f64,
    pub analytic_pointwise: f64,
    pub analytic_ratio: f64,
    pub mean_compression: f64,
}

impl MeasuredCost {
    pub const CSV_HEADER: &'static str = "queries,joint_flops,pointwise_flops,ratio,joint_seconds,pointwise_seconds,\
analytic_joint,analytic_pointwise,analytic_ratio,mean_compression";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.queries,
            self.joint_flops,
            self.pointwise_flops,
            self.ratio,
            self.joint_seconds,
            self.pointwise_seconds,
            self.analytic_joint,
            self.analytic_pointwise,
            self.analytic_ratio,
            self.mean_compression
        )
    }
}

pub fn bench(model: &Model, dataset: &[RankingInstance], max_union: usize, reinjection: bool) -> Result<MeasuredCost> {
    if dataset.is_empty() {
        return Err(Error::Invalid("bench needs at least one instance".into()));
    }
    let start = Instant::now();
    let joint: Vec<(u64, usize)> = dataset
        .par_iter()
        .map(|inst| {
            let s = model.score_joint(&inst.query, &inst.items, max_union, reinjection)?;
            Ok((s.matmul_flops, s.union.union_len()))
        })
        .collect::<Result<_>>()?;
    let joint_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    let pointwise: Vec<u64> = dataset
        .par_iter()
        .map(|inst| {
            inst.items.iter().map(|it| Ok(model.pointwise_score(&inst.query, it)?.matmul_flops)).sum::<Result<u64>>()
        })
        .collect::<Result<_>>()?;
    let pointwise_seconds = start.elapsed().as_secs_f64();

    let layers = model.config.layers as f64;
    let (mut a_joint, mut a_point, mut c_sum) = (0.0, 0.0, 0.0);
    for (inst, &(_, union_len)) in dataset.iter().zip(&joint) {
        let n = inst.n_items() as f64;
        let l_k = inst.items.iter().map(|i| i.len()).sum::<usize>() as f64 / n;
        let c = (l_k * n / union_len.max(1) as f64).max(1.0);
        let a = cost_model(inst.query.len() as f64, l_k.max(f64::MIN_POSITIVE), n, c, layers)?;
        a_joint += a.joint;
        a_point += a.pointwise;
        c_sum += c;
    }
    let joint_flops: u64 = joint.iter().map(|j| j.0).sum();
    let pointwise_flops: u64 = pointwise.iter().sum();
    Ok(MeasuredCost {
        queries: dataset.len(),
        joint_flops,
        pointwise_flops,
        ratio: pointwise_flops as f64 / joint_flops as f64,
        joint_seconds,
        pointwise_seconds,
        analytic_joint: a_joint,
        analytic_pointwise: a_point,
        analytic_ratio: a_point / a_joint,
        mean_compression: c_sum / dataset.len() as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::harness::cost::{classifier_flops, encoder_matmul_flops};
    use crate::tokenizer::TokenSequence;

    fn model(layers: usize) -> Model {
        let cfg = EncoderConfig { layers, d_model: 8, heads: 2, ff_dim: 8, max_positions: 40, vocab_size: 32 };
        Model::init(cfg, 1).unwrap()
    }

    fn inst(q: &[u32], items: &[&[u32]]) -> RankingInstance {
        RankingInstance {
            query: TokenSequence::from_ids(q.to_vec()),
            items: items.iter().map(|i| TokenSequence::from_ids(i.to_vec())).collect(),
            targets: vec![0.5; items.len()],
        }
    }

    #[test]
    fn counts_match_formula() {
        let m = model(2);
        let data = [inst(&[4, 5], &[&[6, 7, 8], &[7, 9, 10]])];
        let r = bench(&m, &data, 64, false).unwrap();
        // union {6,7,8,9,10}: 2 + 2 + 5 tokens jointly, 2 + 2 + 3 per item
        assert_eq!(r.joint_flops, encoder_matmul_flops(&m.config, 9) + classifier_flops(&m.config, 2));
        assert_eq!(r.pointwise_flops, 2 * (encoder_matmul_flops(&m.config, 7) + classifier_flops(&m.config, 1)));
    }

    #[test]
    fn single_item_paths_agree() {
        let m = model(1);
        let r = bench(&m, &[inst(&[4], &[&[5, 6, 7]])], 64, false).unwrap();
        assert_eq!(r.joint_flops, r.pointwise_flops);
        // an internal duplicate only shrinks the joint side
        let r = bench(&m, &[inst(&[4], &[&[5, 6, 5]])], 64, false).unwrap();
        assert!(r.joint_flops < r.pointwise_flops);
    }

    #[test]
    fn doubling_layers_doubles_flops() {
        let data = [inst(&[4, 5], &[&[6, 7], &[7, 8], &[6, 8]])];
        let a = bench(&model(1), &data, 64, false).unwrap();
        let b = bench(&model(2), &data, 64, false).unwrap();
        for (x, y) in [(a.joint_flops, b.joint_flops), (a.pointwise_flops, b.pointwise_flops)] {
            assert!((y as f64 / x as f64 - 2.0).abs() < 0.05 * 2.0);
        }
    }
}
