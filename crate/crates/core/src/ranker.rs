//! Selective pooling, shared-classifier scoring and ranking, for the joint
//! (token-union) path and the one-pair-at-a-time pointwise baseline.
//!
//! A joint forward for one query:
//!
//! ```text
//! items ──build_union──▶ union + masks
//!                          │
//! [CLS] q [SEP] union ──encode──▶ E ──selective mean (mask j)──▶ e_j ──<w, .>──▶ f_j
//! ```
//!
//! Item `j` pools the query rows, the `[SEP]` row and exactly those union
//! rows whose token occurs in item `j`. `[CLS]` and padding are never pooled.

use crate::encoder::{
    assemble_input, assemble_tokens, encode_graph, sinusoid, ContextEmbeddings, EncoderConfig, ModelParams,
    ParamNodes, CLASSIFIER,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};
use crate::tokenizer::TokenSequence;
use crate::union::{build_union, UnionEncoding};

#[derive(Debug, Clone, PartialEq)]
pub struct PooledReps {
    /// `[N, d]`
    pub rows: Tensor,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVector {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
}

impl ScoreVector {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let mut scores = logits.clone();
        crate::tensor::graph::softmax_in_place(&mut scores);
        ScoreVector { logits, scores }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }
}

/// Encoder-input row indices pooled for each item.
pub fn selection_rows(union: &UnionEncoding) -> Vec<Vec<usize>> {
    let q = union.query_len;
    (0..union.n_items())
        .map(|j| {
            // query rows and [SEP] sit at 1..=q+1; union row m at q+2+m
            let mut rows: Vec<usize> = (1..=q + 1).collect();
            rows.extend(
                union.union_span(j).iter().enumerate().filter(|(_, &b)| b == 1).map(|(m, _)| q + 2 + m),
            );
            rows
        })
        .collect()
}

/// Per-item mean of the sinusoids added to the pooled union rows, i.e. the
/// offset positional re-injection contributes to each pooled row.
pub fn reinjection_offsets(union: &UnionEncoding, d: usize) -> Result<Tensor> {
    let rows = selection_rows(union);
    let mut out = vec![0.0; union.n_items() * d];
    for (j, sel) in rows.iter().enumerate() {
        let acc = &mut out[j * d..(j + 1) * d];
        for (m, &bit) in union.union_span(j).iter().enumerate() {
            if bit == 0 {
                continue;
            }
            let pos = union.item_positions[j][m]
                .ok_or_else(|| Error::Invalid(format!("item {j} has no position for union token {m}")))?;
            for (a, s) in acc.iter_mut().zip(sinusoid(pos, d)) {
                *a += s;
            }
        }
        let c = sel.len() as f64;
        acc.iter_mut().for_each(|a| *a /= c);
    }
    Tensor::new(vec![union.n_items(), d], out)
}

/// Record selective mean pooling of the `[n, d]` node `e` on `g`.
pub fn pool_graph(g: &mut Graph, e: NodeId, union: &UnionEncoding, reinjection: bool) -> Result<NodeId> {
    let pooled = g.selective_mean(e, selection_rows(union))?;
    if !reinjection {
        return Ok(pooled);
    }
    let d = g.shape(e)[1];
    let offsets = g.constant(reinjection_offsets(union, d)?)?;
    g.add(pooled, offsets)
}

/// Selective mean pooling of already-computed context rows. With
/// re-injection on, each selected union row gets its item-specific
/// sinusoid added before averaging.
pub fn selective_pool(e: &ContextEmbeddings, union: &UnionEncoding, reinjection: bool) -> Result<PooledReps> {
    let expected_rows = 2 + union.query_len + union.union_len();
    if e.matrix.rank() != 2 || e.matrix.shape()[0] < expected_rows || e.spans.query.len() != union.query_len {
        return Err(Error::shape(
            "selective_pool",
            format!("embeddings {:?} do not match union of {} tokens", e.matrix.shape(), union.union_len()),
        ));
    }
    let d = e.matrix.shape()[1];
    let rows = selection_rows(union);
    let mut out = Vec::with_capacity(rows.len() * d);
    for (j, sel) in rows.iter().enumerate() {
        let mut acc = vec![0.0; d];
        if reinjection {
            for (_, v) in crate::encoder::reinject_positional(e, union, j)? {
                acc.iter_mut().zip(&v).for_each(|(a, x)| *a += x);
            }
        } else {
            for &r in sel {
                acc.iter_mut().zip(e.matrix.row(r)).for_each(|(a, x)| *a += x);
            }
        }
        let c = sel.len() as f64;
        out.extend(acc.into_iter().map(|a| a / c));
    }
    Ok(PooledReps { rows: Tensor::new(vec![rows.len(), d], out)?, counts: rows.iter().map(Vec::len).collect() })
}

/// Logits `<w, e_j>` and their softmax across the `N` items.
pub fn score(pooled: &PooledReps, w: &Tensor) -> Result<ScoreVector> {
    let d = pooled.rows.shape()[1];
    if w.numel() != d {
        return Err(Error::shape("score", format!("classifier of {} entries for d = {d}", w.numel())));
    }
    let logits = (0..pooled.rows.shape()[0])
        .map(|j| pooled.rows.row(j).iter().zip(w.data()).map(|(a, b)| a * b).sum())
        .collect();
    Ok(ScoreVector::from_logits(logits))
}

/// Item indices by descending score, ties by ascending index.
pub fn rank(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Record the classifier on `g`: `[N, d] x w -> [N]` logits.
pub fn classify_graph(g: &mut Graph, p: &ParamNodes, pooled: NodeId) -> Result<NodeId> {
    let n = g.shape(pooled)[0];
    let d = g.shape(pooled)[1];
    let w = g.reshape(p.get(CLASSIFIER)?, &[d, 1])?;
    let logits = g.matmul(pooled, w)?;
    g.reshape(logits, &[n])
}

/// A joint forward recorded on a graph.
#[derive(Debug)]
pub struct JointForward {
    pub union: UnionEncoding,
    pub logits: NodeId,
}

/// Encoder configuration and parameters (classifier included).
#[derive(Debug, Clone)]
pub struct Model {
    pub config: EncoderConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: EncoderConfig, params: ModelParams) -> Result<Self> {
        params.check_shapes(&config)?;
        Ok(Model { config, params })
    }

    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        Ok(Model { config, params: ModelParams::init(&config, seed)? })
    }

    /// Record the joint path for one query on `g`.
    pub fn joint_graph(
        &self,
        g: &mut Graph,
        p: &ParamNodes,
        query: &TokenSequence,
        items: &[TokenSequence],
        max_union: usize,
        reinjection: bool,
    ) -> Result<JointForward> {
        let union = build_union(items, query, max_union)?;
        let len = 2 + query.len() + union.union_len();
        if len > self.config.max_positions {
            return Err(Error::Overflow { required: len, max_len: self.config.max_positions });
        }
        let input = assemble_input(query, &union, len)?;
        let e = encode_graph(g, p, &self.config, &input)?;
        let pooled = pool_graph(g, e, &union, reinjection)?;
        let logits = classify_graph(g, p, pooled)?;
        Ok(JointForward { union, logits })
    }

    /// Score all items of one query in a single encoder pass.
    pub fn score_joint(
        &self,
        query: &TokenSequence,
        items: &[TokenSequence],
        max_union: usize,
        reinjection: bool,
    ) -> Result<JointScores> {
        let mut g = Graph::inference();
        let p = self.params.register(&mut g)?;
        let fwd = self.joint_graph(&mut g, &p, query, items, max_union, reinjection)?;
        let logits = g.value(fwd.logits).data().to_vec();
        Ok(JointScores { scores: ScoreVector::from_logits(logits), union: fwd.union, matmul_flops: g.matmul_flops() })
    }

    /// Logit of one `(query, item)` pair encoded on its own, with the item
    /// tokens in their given order and duplicates kept.
    pub fn pointwise_score(&self, query: &TokenSequence, item: &TokenSequence) -> Result<PointwiseScore> {
        let len = 2 + query.len() + item.len();
        if len > self.config.max_positions {
            return Err(Error::Overflow { required: len, max_len: self.config.max_positions });
        }
        let input = assemble_tokens(&query.ids, &item.ids, len)?;
        let mut g = Graph::inference();
        let p = self.params.register(&mut g)?;
        let e = encode_graph(&mut g, &p, &self.config, &input)?;
        let pooled = g.selective_mean(e, vec![(1..len).collect()])?;
        let logit = classify_graph(&mut g, &p, pooled)?;
        Ok(PointwiseScore { logit: g.value(logit).item(), matmul_flops: g.matmul_flops() })
    }
}

#[derive(Debug, Clone)]
pub struct JointScores {
    pub scores: ScoreVector,
    pub union: UnionEncoding,
    pub matmul_flops: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointwiseScore {
    pub logit: f64,
    pub matmul_flops: u64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::encode;

    fn seq(ids: &[u32]) -> TokenSequence {
        TokenSequence::from_ids(ids.to_vec())
    }

    fn tiny() -> Model {
        let cfg = EncoderConfig { layers: 1, d_model: 8, heads: 2, ff_dim: 16, max_positions: 24, vocab_size: 24 };
        Model::init(cfg, 9).unwrap()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(rank(&[0.2, 0.5, 0.3]), vec![1, 2, 0]);
        assert_eq!(rank(&[0.25; 4]), vec![0, 1, 2, 3]);
    }

    #[test]
    fn score_examples() {
        let pooled = PooledReps { rows: Tensor::matrix(1, 2, vec![0.3, 0.4]).unwrap(), counts: vec![2] };
        assert_eq!(score(&pooled, &Tensor::vector(vec![1.0, 2.0])).unwrap().scores, vec![1.0]);

        let pooled = PooledReps { rows: Tensor::matrix(3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap(), counts: vec![1; 3] };
        let s = score(&pooled, &Tensor::zeros(&[2])).unwrap();
        assert!(s.scores.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));

        let s = ScoreVector::from_logits(vec![1.0, 0.0]);
        let e = std::f64::consts::E;
        assert!((s.scores[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((s.scores[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn pool_single_union_row_with_empty_query() {
        let m = tiny();
        let q = seq(&[]);
        let u = build_union(&[seq(&[7])], &q, 8).unwrap();
        let inp = assemble_input(&q, &u, 3).unwrap();
        let e = encode(&inp, &m.params, &m.config).unwrap();
        let p = selective_pool(&e, &u, false).unwrap();
        assert_eq!(p.counts, vec![2]);
        for c in 0..8 {
            let expect = (e.matrix.row(1)[c] + e.matrix.row(2)[c]) / 2.0;
            assert!((p.rows.row(0)[c] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn pool_hand_instance() {
        let m = tiny();
        let q = seq(&[4, 5]);
        let u = build_union(&[seq(&[9, 11]), seq(&[10]), seq(&[9, 10, 11])], &q, 8).unwrap();
        let inp = assemble_input(&q, &u, 7).unwrap();
        let e = encode(&inp, &m.params, &m.config).unwrap();
        let p = selective_pool(&e, &u, false).unwrap();
        // union [9, 10, 11] at rows 4, 5, 6
        let expected_rows: [&[usize]; 3] = [&[1, 2, 3, 4, 6], &[1, 2, 3, 5], &[1, 2, 3, 4, 5, 6]];
        for (j, rows) in expected_rows.iter().enumerate() {
            assert_eq!(p.counts[j], rows.len());
            for c in 0..8 {
                let mean = rows.iter().map(|&r| e.matrix.row(r)[c]).sum::<f64>() / rows.len() as f64;
                assert!((p.rows.row(j)[c] - mean).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn identical_items_identical_rows() {
        let m = tiny();
        let s = m.score_joint(&seq(&[4]), &[seq(&[8, 9]), seq(&[9, 8]), seq(&[10])], 8, false).unwrap();
        assert_eq!(s.scores.logits[0], s.scores.logits[1]);
    }

    #[test]
    fn graph_pooling_matches_value_pooling() {
        let m = tiny();
        let q = seq(&[4, 5]);
        let items = [seq(&[9, 11, 12]), seq(&[12, 10]), seq(&[13, 9])];
        let u = build_union(&items, &q, 8).unwrap();
        let inp = assemble_input(&q, &u, 2 + 2 + u.union_len()).unwrap();
        let e = encode(&inp, &m.params, &m.config).unwrap();
        for reinjection in [false, true] {
            let direct = selective_pool(&e, &u, reinjection).unwrap();
            let mut g = Graph::inference();
            let en = g.constant(e.matrix.clone()).unwrap();
            let node = pool_graph(&mut g, en, &u, reinjection).unwrap();
            for (a, b) in g.value(node).data().iter().zip(direct.rows.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_matches_joint_for_single_sorted_item() {
        let m = tiny();
        let q = seq(&[4, 5]);
        let item = seq(&[6, 9, 13]);
        let joint = m.score_joint(&q, std::slice::from_ref(&item), 16, false).unwrap();
        let pw = m.pointwise_score(&q, &item).unwrap();
        assert!((joint.scores.logits[0] - pw.logit).abs() < 1e-9);
        assert_eq!(pw, m.pointwise_score(&q, &item).unwrap());
    }

    #[test]
    fn overflow_rejected() {
        let m = tiny();
        let item = seq(&(4..24).collect::<Vec<_>>());
        assert!(matches!(m.pointwise_score(&seq(&[4, 5, 6]), &item), Err(Error::Overflow { .. })));
    }
}
