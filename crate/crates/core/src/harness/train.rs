//! AdamW over whole-query batches.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::dataset::RankingInstance;
use crate::losses::loss_node;
use crate::ranker::Model;
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    /// Mean loss over the batch's informative queries; `None` when all were skipped.
    pub loss: Option<f64>,
    pub lr: f64,
    pub queries: Vec<usize>,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<StepLog>,
    /// Degenerate query visits left out of the loss.
    pub skipped_instances: usize,
}

/// Loss and parameter gradients of one query, `None` if its loss is degenerate.
pub fn query_gradients(
    model: &Model,
    config: &TrainConfig,
    inst: &RankingInstance,
) -> Result<Option<(f64, BTreeMap<String, Tensor>)>> {
    let inst = inst.truncated(config.n_items);
    let mut g = Graph::new();
    let p = model.params.register(&mut g)?;
    let fwd = model.joint_graph(&mut g, &p, &inst.query, &inst.items, config.max_union, config.reinjection)?;
    let Some(loss) = loss_node(&mut g, config.loss, fwd.logits, &inst.targets)? else {
        return Ok(None);
    };
    let value = g.value(loss).item();
    Ok(Some((value, g.backward(loss)?)))
}

struct AdamW {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    t: i32,
}

/// Biases and LayerNorm scales are not decayed.
fn decays(name: &str) -> bool {
    let last = name.rsplit('.').next().unwrap_or(name);
    !(last == "gamma" || last == "beta" || (last.len() == 2 && last.starts_with('b')))
}

impl AdamW {
    fn new() -> Self {
        AdamW { moments: BTreeMap::new(), t: 0 }
    }

    fn step(&mut self, model: &mut Model, grads: &BTreeMap<String, Tensor>, lr: f64, c: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, param) in model.params.as_map_mut() {
            let Some(g) = grads.get(name) else { continue };
            let n = param.numel();
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let wd = if decays(name) { c.weight_decay } else { 0.0 };
            for (i, (p, &gi)) in param.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.adam_eps);
                *p -= lr * (update + wd * *p);
            }
        }
    }
}

/// Train from the seeded initialization. Batches are drawn from a seeded
/// permutation of the dataset, reshuffled every epoch.
pub fn train(config: &TrainConfig, dataset: &[RankingInstance]) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::init(config.encoder, config.seed)?;
    train_from(model, config, dataset)
}

pub fn train_from(mut model: Model, config: &TrainConfig, dataset: &[RankingInstance]) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Invalid("cannot train on an empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut cursor = order.len();
    let mut opt = AdamW::new();
    let mut log = Vec::with_capacity(config.steps);
    let mut skipped_instances = 0;

    for step in 0..config.steps {
        let mut batch = Vec::with_capacity(config.batch_size);
        while batch.len() < config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }

        let non_finite = |queries: Vec<usize>| Error::NonFiniteLoss { step, queries };
        let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut total = 0.0;
        let mut used = 0usize;
        for &qi in &batch {
            let res = match query_gradients(&model, config, &dataset[qi]) {
                Err(Error::NonFinite { .. }) => return Err(non_finite(vec![qi])),
                r => r?,
            };
            let Some((loss, grads)) = res else {
                skipped_instances += 1;
                continue;
            };
            if !loss.is_finite() {
                return Err(non_finite(vec![qi]));
            }
            total += loss;
            used += 1;
            for (name, g) in grads {
                match sum.get_mut(&name) {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    None => {
                        sum.insert(name, g);
                    }
                }
            }
        }

        let lr = config.lr_at(step);
        let loss = (used > 0).then(|| total / used as f64);
        if used > 0 {
            let scale = 1.0 / used as f64;
            for g in sum.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= scale);
            }
            opt.step(&mut model, &sum, lr, config);
            if !model.params.as_map().values().all(Tensor::is_finite) {
                return Err(non_finite(batch));
            }
        }
        log::debug!("step {step} loss {loss:?} lr {lr:e} skipped {}", batch.len() - used);
        log.push(StepLog { step, loss, lr, skipped: batch.len() - used, queries: batch });
    }
    Ok(TrainOutcome { model, log, skipped_instances })
}

/// Mean loss over the informative queries of `dataset`.
pub fn dataset_loss(model: &Model, config: &TrainConfig, dataset: &[RankingInstance]) -> Result<Option<f64>> {
    let mut total = 0.0;
    let mut used = 0;
    for inst in dataset {
        let inst = inst.truncated(config.n_items);
        let mut g = Graph::inference();
        let p = model.params.register(&mut g)?;
        let fwd = model.joint_graph(&mut g, &p, &inst.query, &inst.items, config.max_union, config.reinjection)?;
        if let Some(l) = loss_node(&mut g, config.loss, fwd.logits, &inst.targets)? {
            total += g.value(l).item();
            used += 1;
        }
    }
    Ok((used > 0).then(|| total / used as f64))
}
