//! Per-query training objectives over a logit vector `f` and soft targets `y`.
//!
//! | name      | form                                                        |
//! |-----------|-------------------------------------------------------------|
//! | `bce`     | `-sum_j y_j ln sig(f_j) + (1 - y_j) ln(1 - sig(f_j))`       |
//! | `listnet` | cross-entropy of `softmax(y)` against `softmax(f)`           |
//! | `ce`      | cross-entropy of `y / sum(y)` against `softmax(f)`           |
//! | `rpl`     | cross-entropy of normalized lower-set target mass against    |
//! |           | `softmax` of lower-set logit sums                            |
//!
//! The ranking-probability loss uses the lower sets `L_j = {k : y_k < y_j}`:
//! modified targets `y~_j = sum_{k in L_j} y_k` and modified scores
//! `s~_j = sum_{k in L_j} f_k`. It is the `listnet`-style cross-entropy
//! evaluated on `(y~ / sum(y~), s~)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Target mass below which an instance carries no supervision.
pub const MASS_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    #[serde(rename = "listnet")]
    ListNet,
    Ce,
    Rpl,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [LossKind::Bce, LossKind::ListNet, LossKind::Ce, LossKind::Rpl];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Bce => "bce",
            LossKind::ListNet => "listnet",
            LossKind::Ce => "ce",
            LossKind::Rpl => "rpl",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bce" => Ok(LossKind::Bce),
            "listnet" => Ok(LossKind::ListNet),
            "ce" => Ok(LossKind::Ce),
            "rpl" => Ok(LossKind::Rpl),
            other => Err(Error::Invalid(format!("unknown loss `{other}` (expected bce|listnet|ce|rpl)"))),
        }
    }
}

/// `sets[j] = {k : y_k < y_j}` in ascending index order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LowerSets(pub Vec<Vec<usize>>);

impl LowerSets {
    pub fn get(&self, j: usize) -> &[usize] {
        &self.0[j]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `out_j = sum_{k in L_j} values_k`
    pub fn accumulate(&self, values: &[f64]) -> Vec<f64> {
        self.0.iter().map(|set| set.iter().map(|&k| values[k]).sum()).collect()
    }
}

pub fn lower_sets(y: &[f64]) -> LowerSets {
    LowerSets(
        y.iter()
            .map(|&yj| y.iter().enumerate().filter(|(_, &yk)| yk < yj).map(|(k, _)| k).collect())
            .collect(),
    )
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let mut v = x.to_vec();
    crate::tensor::graph::softmax_in_place(&mut v);
    v
}

/// `-sum_j p_j ln softmax(logits)_j`
pub fn cross_entropy(p: &[f64], logits: &[f64]) -> f64 {
    let lse = crate::tensor::graph::log_sum_exp(logits);
    -p.iter().zip(logits).map(|(pj, z)| if *pj == 0.0 { 0.0 } else { pj * (z - lse) }).sum::<f64>()
}

fn check_lengths(y: &[f64], logits: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != logits.len() {
        return Err(Error::Invalid(format!("{} targets for {} logits", y.len(), logits.len())));
    }
    if y.iter().chain(logits).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "loss" });
    }
    Ok(())
}

fn check_unit_targets(y: &[f64]) -> Result<()> {
    match y.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(v) => Err(Error::Invalid(format!("target {v} outside [0, 1]"))),
        None => Ok(()),
    }
}

pub fn bce_loss(y: &[f64], logits: &[f64]) -> Result<f64> {
    check_lengths(y, logits)?;
    check_unit_targets(y)?;
    Ok(logits.iter().zip(y).map(|(&f, &t)| crate::tensor::graph::bce_term(f, t)).sum())
}

pub fn listnet_loss(y: &[f64], logits: &[f64]) -> Result<f64> {
    check_lengths(y, logits)?;
    Ok(cross_entropy(&softmax(y), logits))
}

/// `y / sum(y)`, or `None` when the mass is below [`MASS_EPS`].
fn normalized(y: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = y.iter().sum();
    (total > MASS_EPS).then(|| y.iter().map(|v| v / total).collect())
}

/// `None` marks a degenerate instance (zero target mass).
pub fn ce_loss(y: &[f64], logits: &[f64]) -> Result<Option<f64>> {
    check_lengths(y, logits)?;
    Ok(normalized(y).map(|p| cross_entropy(&p, logits)))
}

/// Normalized modified targets `y~ / sum(y~)`; `None` when degenerate.
pub fn rpl_targets(y: &[f64]) -> Option<Vec<f64>> {
    normalized(&lower_sets(y).accumulate(y))
}

/// Modified scores `s~_j = sum_{k in L_j} f_k`.
pub fn rpl_scores(y: &[f64], logits: &[f64]) -> Vec<f64> {
    lower_sets(y).accumulate(logits)
}

/// Ranking-probability loss for one query. `None` marks a degenerate
/// instance (all lower sets carry zero target mass).
pub fn rpl_loss(y: &[f64], logits: &[f64]) -> Result<Option<f64>> {
    check_lengths(y, logits)?;
    let sets = lower_sets(y);
    let y_mod = sets.accumulate(y);
    let s_mod = sets.accumulate(logits);
    let mass: f64 = y_mod.iter().sum();
    if mass <= MASS_EPS {
        return Ok(None);
    }
    let lse = crate::tensor::graph::log_sum_exp(&s_mod);
    let mut loss = 0.0;
    for (t, s) in y_mod.iter().zip(&s_mod) {
        if *t > 0.0 {
            loss -= (t / mass) * (s - lse);
        }
    }
    Ok(Some(loss))
}

/// Value of `kind` for one query; `None` for skipped degenerate instances.
pub fn loss_value(kind: LossKind, y: &[f64], logits: &[f64]) -> Result<Option<f64>> {
    match kind {
        LossKind::Bce => bce_loss(y, logits).map(Some),
        LossKind::ListNet => listnet_loss(y, logits).map(Some),
        LossKind::Ce => ce_loss(y, logits),
        LossKind::Rpl => rpl_loss(y, logits),
    }
}

/// Record `kind` on `g` over the `[N]` logits node. Returns `None` (and
/// records nothing) for degenerate instances.
pub fn loss_node(g: &mut Graph, kind: LossKind, logits: NodeId, y: &[f64]) -> Result<Option<NodeId>> {
    let n = g.value(logits).numel();
    if y.len() != n {
        return Err(Error::Invalid(format!("{} targets for {n} logits", y.len())));
    }
    match kind {
        LossKind::Bce => {
            check_unit_targets(y)?;
            g.sigmoid_bce(logits, y).map(Some)
        }
        LossKind::ListNet => g.softmax_cross_entropy(logits, &softmax(y)).map(Some),
        LossKind::Ce => match normalized(y) {
            Some(p) => g.softmax_cross_entropy(logits, &p).map(Some),
            None => Ok(None),
        },
        LossKind::Rpl => {
            let Some(target) = rpl_targets(y) else { return Ok(None) };
            let sets = lower_sets(y);
            let mut a = vec![0.0; n * n];
            for (j, set) in sets.0.iter().enumerate() {
                for &k in set {
                    a[j * n + k] = 1.0;
                }
            }
            let a = g.constant(Tensor::new(vec![n, n], a)?)?;
            let f = g.reshape(logits, &[n, 1])?;
            let s = g.matmul(a, f)?;
            let s = g.reshape(s, &[n])?;
            g.softmax_cross_entropy(s, &target).map(Some)
        }
    }
}

/// Ranking-probability matrix with `p_jk = C * sum_{l in L_k} f_l`, the
/// lower sets taken from `reference`, and `C` normalizing the entries to
/// sum to one. Every row is identical.
#[derive(Debug, Clone, PartialEq)]
pub struct RankProbMatrix {
    pub entries: Vec<Vec<f64>>,
    /// `C`; zero when every partial sum vanishes.
    pub normalizer: f64,
}

impl RankProbMatrix {
    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.entries.len()).map(|j| self.entries[j][j]).collect()
    }

    /// Diagonal rescaled to sum to one (all zeros if it sums to zero).
    pub fn normalized_diagonal(&self) -> Vec<f64> {
        let d = self.diagonal();
        normalized(&d).unwrap_or(d)
    }
}

/// Map scores into `[0, 1]`: unchanged when already there, otherwise
/// min-max scaled (a constant vector maps to ones).
pub fn to_unit_interval(f: &[f64]) -> Vec<f64> {
    if f.iter().all(|v| (0.0..=1.0).contains(v)) {
        return f.to_vec();
    }
    let lo = f.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![1.0; f.len()];
    }
    f.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn ranking_prob_matrix(f: &[f64], reference: &[f64]) -> Result<RankProbMatrix> {
    if f.is_empty() || f.len() != reference.len() {
        return Err(Error::Invalid(format!("{} scores for {} reference values", f.len(), reference.len())));
    }
    let n = f.len();
    let partial = lower_sets(reference).accumulate(&to_unit_interval(f));
    let total = n as f64 * partial.iter().sum::<f64>();
    let normalizer = if total > 0.0 { 1.0 / total } else { 0.0 };
    let row: Vec<f64> = if total > 0.0 { partial.iter().map(|p| p * normalizer).collect() } else { partial };
    Ok(RankProbMatrix { entries: vec![row; n], normalizer })
}

/// `KL(p || q)` with `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lower_set_examples() {
        assert_eq!(lower_sets(&[0.0, 1.0, 2.0]).0, vec![vec![], vec![0], vec![0, 1]]);
        assert_eq!(lower_sets(&[0.3; 4]).0, vec![Vec::<usize>::new(); 4]);
        assert_eq!(lower_sets(&[1.0, 1.0, 0.0]).0, vec![vec![2], vec![2], vec![]]);
    }

    #[test]
    fn bce_examples() {
        assert!((bce_loss(&[0.5], &[0.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // sigma(f) = 1 - 1e-12
        let f = ((1.0 - 1e-12) / 1e-12f64).ln();
        assert!(bce_loss(&[1.0], &[f]).unwrap() < 1e-11);
        let y = [0.2, 0.9, 0.0];
        let f = [0.3, -1.2, 2.0];
        let sum: f64 = (0..3).map(|i| bce_loss(&y[i..=i], &f[i..=i]).unwrap()).sum();
        assert!((bce_loss(&y, &f).unwrap() - sum).abs() < 1e-15);
        assert!(bce_loss(&[1.5], &[0.0]).is_err());
    }

    #[test]
    fn listnet_examples() {
        let y = [0.1, 0.7, 0.4];
        let p = softmax(&y);
        let entropy: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
        assert!((listnet_loss(&y, &y).unwrap() - entropy).abs() < 1e-14);
        assert_eq!(listnet_loss(&[0.4], &[3.0]).unwrap(), 0.0);
        // one-hot targets with a large margin approach plain CE at the hot index
        let f = [0.3, -0.5, 1.1];
        let ln = listnet_loss(&[0.0, 60.0, 0.0], &f).unwrap();
        let ce = ce_loss(&[0.0, 1.0, 0.0], &f).unwrap().unwrap();
        assert!((ln - ce).abs() < 1e-12);
    }

    #[test]
    fn ce_examples() {
        assert!(ce_loss(&[0.0, 1.0, 0.0], &[0.0, 40.0, 0.0]).unwrap().unwrap() < 1e-16);
        let n = 5;
        let l = ce_loss(&vec![0.3; n], &vec![1.7; n]).unwrap().unwrap();
        assert!((l - (n as f64).ln()).abs() < 1e-14);
        assert_eq!(ce_loss(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), None);
    }

    #[test]
    fn rpl_hand_expansion() {
        assert_eq!(rpl_loss(&[0.0, 1.0], &[0.4, -0.2]).unwrap(), None);
        let f1 = 0.8;
        let l = rpl_loss(&[0.2, 1.0], &[f1, -0.3]).unwrap().unwrap();
        // s~ = [0, f1], target [0, 1]
        let expect = -(f1 - (1.0f64 + f1.exp()).ln());
        assert!((l - expect).abs() < 1e-15);
        assert_eq!(rpl_loss(&[0.5; 3], &[1.0, 2.0, 3.0]).unwrap(), None);
        assert_eq!(rpl_loss(&[0.5], &[1.0]).unwrap(), None);
    }

    #[test]
    fn rpl_bounded_below_by_target_entropy() {
        let y = [0.1, 0.4, 0.7, 0.9];
        let t = rpl_targets(&y).unwrap();
        let entropy: f64 = t.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum();
        for step in 0..=10 {
            let m = step as f64 * 0.5;
            let ordered: Vec<f64> = (0..4).map(|i| m * (i as f64 + 1.0)).collect();
            let reversed: Vec<f64> = ordered.iter().rev().map(|v| -v).collect();
            for f in [ordered, reversed] {
                assert!(rpl_loss(&y, &f).unwrap().unwrap() >= entropy - 1e-12);
            }
        }
    }

    #[test]
    fn rpl_two_items_falls_with_margin() {
        let mut last = f64::INFINITY;
        for step in 0..=20 {
            let m = step as f64 * 0.5;
            let l = rpl_loss(&[0.2, 1.0], &[m, 2.0 * m]).unwrap().unwrap();
            assert!(l < last);
            last = l;
        }
    }

    #[test]
    fn rpl_grows_past_target_match_for_three_or_more_items() {
        // cumulative targets are not one-hot, so a large enough margin overshoots
        let y = [0.1, 0.4, 0.7, 0.9];
        let at = |m: f64| rpl_loss(&y, &[m, 2.0 * m, 3.0 * m, 4.0 * m]).unwrap().unwrap();
        assert!(at(0.5) < at(0.0));
        assert!(at(5.0) > at(0.5));
    }

    #[test]
    fn shift_changes_rpl_scores_by_lower_set_size() {
        let y = [0.3, 0.9, 0.1, 0.6];
        let f = [0.2, -1.0, 0.7, 1.5];
        let c = 0.37;
        let shifted: Vec<f64> = f.iter().map(|v| v + c).collect();
        let sets = lower_sets(&y);
        let (a, b) = (rpl_scores(&y, &f), rpl_scores(&y, &shifted));
        for j in 0..4 {
            assert!((b[j] - a[j] - c * sets.get(j).len() as f64).abs() < 1e-12);
        }
        assert!((listnet_loss(&y, &f).unwrap() - listnet_loss(&y, &shifted).unwrap()).abs() < 1e-10);
        assert!((ce_loss(&y, &f).unwrap().unwrap() - ce_loss(&y, &shifted).unwrap().unwrap()).abs() < 1e-10);
        // all |L_j| equal forces every L_j empty, which is the degenerate case
        assert_eq!(rpl_loss(&[0.4; 4], &shifted).unwrap(), None);
    }

    #[test]
    fn rpl_ignores_the_top_items_logit() {
        // the top item sits in no lower set, so its logit never enters s~
        let y = [0.3, 0.9, 0.1, 0.6];
        let base = rpl_loss(&y, &[0.2, -1.0, 0.7, 1.5]).unwrap().unwrap();
        for f1 in [-50.0, 0.0, 3.0, 50.0] {
            assert_eq!(rpl_loss(&y, &[0.2, f1, 0.7, 1.5]).unwrap().unwrap(), base);
        }
        // while raising the lowest item's logit always lowers the loss
        let lo = rpl_loss(&y, &[0.2, -1.0, 0.8, 1.5]).unwrap().unwrap();
        assert!(lo < base);
    }

    #[test]
    fn rpl_is_listnet_form_on_modified_quantities() {
        let y = [0.3, 0.9, 0.1, 0.6, 0.6];
        let f = [0.2, -1.0, 0.7, 1.5, -0.4];
        let direct = rpl_loss(&y, &f).unwrap().unwrap();
        let via = cross_entropy(&rpl_targets(&y).unwrap(), &rpl_scores(&y, &f));
        assert!((direct - via).abs() <= 1e-12 * direct.abs());
    }

    #[test]
    fn label_scaling_invariance() {
        let y = [0.3, 0.9, 0.1, 0.6];
        let f = [0.2, -1.0, 0.7, 1.5];
        let base = rpl_loss(&y, &f).unwrap().unwrap();
        let scaled: Vec<f64> = y.iter().map(|v| v * 0.37).collect();
        assert!((rpl_loss(&scaled, &f).unwrap().unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_values() {
        let y = [0.3, 0.9, 0.1, 0.6];
        let f = [0.2, -1.0, 0.7, 1.5];
        for kind in LossKind::ALL {
            let mut g = Graph::new();
            let z = g.param("f", Tensor::vector(f.to_vec())).unwrap();
            let node = loss_node(&mut g, kind, z, &y).unwrap().unwrap();
            let v = loss_value(kind, &y, &f).unwrap().unwrap();
            assert!((g.value(node).item() - v).abs() < 1e-13, "{kind}");
        }
    }

    #[test]
    fn graph_skips_degenerate() {
        let mut g = Graph::new();
        let z = g.param("f", Tensor::vector(vec![0.1, 0.2])).unwrap();
        assert!(loss_node(&mut g, LossKind::Rpl, z, &[0.5, 0.5]).unwrap().is_none());
        assert!(loss_node(&mut g, LossKind::Ce, z, &[0.0, 0.0]).unwrap().is_none());
    }

    #[test]
    fn loss_names_parse() {
        for kind in LossKind::ALL {
            assert_eq!(kind.name().parse::<LossKind>().unwrap(), kind);
        }
        assert!("hinge".parse::<LossKind>().is_err());
    }

    #[test]
    fn prob_matrix_uniform_grows_linearly() {
        let p = ranking_prob_matrix(&[0.5; 4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        // partial sums 0, 0.5, 1.0, 1.5; four identical rows sum to 12
        let d = p.diagonal();
        for (k, v) in d.iter().enumerate() {
            assert!((v - 0.5 * k as f64 / 12.0).abs() < 1e-15);
        }
        let total: f64 = p.entries.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prob_matrix_singleton() {
        let p = ranking_prob_matrix(&[0.7], &[0.2]).unwrap();
        assert_eq!(p.entries, vec![vec![0.0]]);
        assert_eq!(p.normalizer, 0.0);
    }

    #[test]
    fn prob_matrix_kl_shrinks_toward_target_order() {
        let y = [0.1, 0.35, 0.6, 0.9];
        let target = ranking_prob_matrix(&y, &y).unwrap().normalized_diagonal();
        let start = [0.9, 0.6, 0.35, 0.1];
        let mut last = f64::INFINITY;
        for t in 0..=10 {
            let a = t as f64 / 10.0;
            let f: Vec<f64> = start.iter().zip(&y).map(|(s, yy)| (1.0 - a) * s + a * yy).collect();
            let q = ranking_prob_matrix(&f, &y).unwrap().normalized_diagonal();
            let kl = kl_divergence(&target, &q);
            assert!(kl <= last + 1e-15, "t={a}: {kl} > {last}");
            last = kl;
        }
        assert!(last < 1e-12);
    }
}
