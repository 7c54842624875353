use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked scalars of |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)
    pub max_rel_error: f64,
    /// max over checked scalars of |analytic - numeric|
    pub max_abs_error: f64,
    /// Parameter name and flat index of the worst scalar.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compare reverse-mode gradients against central differences on every
/// parameter scalar.
///
/// `build` must register each entry of `params` with [`Graph::param`] and
/// return a scalar loss node.
pub fn grad_check<F>(params: &BTreeMap<String, Tensor>, epsilon: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&BTreeMap<String, Tensor>, &mut Graph) -> Result<NodeId>,
{
    let picks = params.iter().map(|(n, t)| (n.clone(), (0..t.numel()).collect())).collect();
    check(params, epsilon, picks, build)
}

/// [`grad_check`] restricted to at most `per_param` seeded-random scalars
/// of each parameter tensor (all of them when the tensor is smaller).
pub fn grad_check_sampled<F>(
    params: &BTreeMap<String, Tensor>,
    epsilon: f64,
    per_param: usize,
    seed: u64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&BTreeMap<String, Tensor>, &mut Graph) -> Result<NodeId>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = params
        .iter()
        .map(|(n, t)| {
            let idx = if t.numel() <= per_param {
                (0..t.numel()).collect()
            } else {
                let mut v = sample(&mut rng, t.numel(), per_param).into_vec();
                v.sort_unstable();
                v
            };
            (n.clone(), idx)
        })
        .collect();
    check(params, epsilon, picks, build)
}

fn eval_loss<F>(params: &BTreeMap<String, Tensor>, build: &F) -> Result<f64>
where
    F: Fn(&BTreeMap<String, Tensor>, &mut Graph) -> Result<NodeId>,
{
    let mut g = Graph::inference();
    let loss = build(params, &mut g)?;
    let v = g.value(loss);
    if !v.is_scalar() {
        return Err(Error::NonScalarLoss(v.shape().to_vec()));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok(v.item())
}

fn check<F>(
    params: &BTreeMap<String, Tensor>,
    epsilon: f64,
    picks: Vec<(String, Vec<usize>)>,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&BTreeMap<String, Tensor>, &mut Graph) -> Result<NodeId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Invalid(format!("grad_check epsilon {epsilon} outside (0, 1e-2]")));
    }
    let mut g = Graph::new();
    let loss = build(params, &mut g)?;
    let analytic = g.backward(loss)?;

    let mut work = params.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, checked: 0 };
    for (name, indices) in picks {
        let grad = analytic.get(&name).ok_or_else(|| Error::MissingParam(name.clone()))?;
        for i in indices {
            let orig = work[&name].data()[i];
            work.get_mut(&name).unwrap().data_mut()[i] = orig + epsilon;
            let plus = eval_loss(&work, &build)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig - epsilon;
            let minus = eval_loss(&work, &build)?;
            work.get_mut(&name).unwrap().data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}
