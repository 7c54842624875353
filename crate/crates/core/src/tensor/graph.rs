use std::collections::BTreeMap;

use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Additive attention logit for masked-out key positions. `exp` of it
/// underflows to exactly zero, so masked keys contribute nothing.
pub const PAD_LOGIT: f64 = -1.0e9;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId, batch: usize, n: usize, k: usize, m: usize, shared_b: bool },
    Add { a: NodeId, b: NodeId, a_map: Option<Vec<usize>>, b_map: Option<Vec<usize>> },
    Mul { a: NodeId, b: NodeId, a_map: Option<Vec<usize>>, b_map: Option<Vec<usize>> },
    Scale { x: NodeId, s: f64 },
    Gelu { x: NodeId },
    Softmax { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { table: NodeId, ids: Vec<usize> },
    MaskedMean { x: NodeId, rows: Vec<Vec<usize>> },
    Transpose { x: NodeId, perm: Vec<usize> },
    Reshape { x: NodeId },
    Sum { x: NodeId },
    SoftmaxXent { logits: NodeId, target: Vec<f64>, probs: Vec<f64> },
    SigmoidBce { logits: NodeId, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and [`Graph::backward`] walks it once in reverse.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: Vec<(String, NodeId)>,
    tracing: bool,
    matmul_flops: u64,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    /// A graph that records every primitive for reverse-mode differentiation.
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), params: Vec::new(), tracing: true, matmul_flops: 0 }
    }

    /// A graph that only evaluates; [`Graph::backward`] is unavailable.
    pub fn inference() -> Self {
        Graph { tracing: false, ..Self::new() }
    }

    pub fn is_tracing(&self) -> bool {
        self.tracing
    }

    /// Matmul multiply-adds performed so far.
    pub fn matmul_flops(&self) -> u64 {
        self.matmul_flops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId], name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = self.tracing && inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "constant" });
        }
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// A named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "param" });
        }
        let requires_grad = self.tracing;
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        let id = NodeId(self.nodes.len() - 1);
        self.params.push((name.into(), id));
        Ok(id)
    }

    /// `[.., n, k] x [k, m]` or `[batch.., n, k] x [batch.., k, m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let bad = || Error::shape("matmul", format!("{sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(bad());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty();
        if !shared_b && batch_a != batch_b {
            return Err(bad());
        }
        let batch: usize = batch_a.iter().product();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * n * m];
        for t in 0..batch {
            let boff = if shared_b { 0 } else { t * k * m };
            gemm(
                &av[t * n * k..(t + 1) * n * k],
                &bv[boff..boff + k * m],
                &mut out[t * n * m..(t + 1) * n * m],
                n,
                k,
                m,
            );
        }
        self.matmul_flops += (batch * n * k * m) as u64;
        let mut shape = batch_a.to_vec();
        shape.extend([n, m]);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::MatMul { a, b, batch, n, k, m, shared_b }, &[a, b], "matmul")
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, a_map, b_map) = self.broadcast("add", a, b)?;
        let out = binary_apply(&shape, self.value(a).data(), &a_map, self.value(b).data(), &b_map, |x, y| x + y);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Add { a, b, a_map, b_map }, &[a, b], "add")
    }

    /// Elementwise product with numpy-style broadcasting.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (shape, a_map, b_map) = self.broadcast("mul", a, b)?;
        let out = binary_apply(&shape, self.value(a).data(), &a_map, self.value(b).data(), &b_map, |x, y| x * y);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Mul { a, b, a_map, b_map }, &[a, b], "mul")
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> Result<NodeId> {
        if !s.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v * s).collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::Scale { x, s }, &[x], "scale")
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let out = xv
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::Gelu { x }, &[x], "gelu")
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let cols = *xv.shape().last().unwrap();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::Softmax { x }, &[x], "softmax")
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [d] || b.shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", xv.shape(), g.shape(), b.shape()),
            ));
        }
        let rows = xv.numel() / d;
        let mut xhat = vec![0.0; xv.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g.data()[c] + b.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta], "layer_norm")
    }

    /// Rows of a `[vocab, d]` table selected by `ids`.
    pub fn gather(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        if tv.rank() != 2 || ids.is_empty() {
            return Err(Error::shape("gather", format!("table {:?}, {} ids", tv.shape(), ids.len())));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("gather", format!("id {bad} out of range for table {:?}", tv.shape())));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        self.push(value, Op::Gather { table, ids: ids.to_vec() }, &[table], "embedding_gather")
    }

    /// Row-wise selective mean: output row `j` is the mean of the rows of
    /// `x` (shape `[n, d]`) where `mask[j]` (shape `[N, n]`) is nonzero.
    pub fn masked_mean(&mut self, x: NodeId, mask: &Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || mask.rank() != 2 || mask.shape()[1] != xv.shape()[0] {
            return Err(Error::shape("masked_mean", format!("x {:?}, mask {:?}", xv.shape(), mask.shape())));
        }
        let n = xv.shape()[0];
        let rows: Vec<Vec<usize>> = mask
            .data()
            .chunks(n)
            .map(|m| m.iter().enumerate().filter(|(_, &w)| w != 0.0).map(|(i, _)| i).collect())
            .collect();
        self.selective_mean(x, rows)
    }

    /// [`Graph::masked_mean`] with the selection given as row index lists.
    pub fn selective_mean(&mut self, x: NodeId, rows: Vec<Vec<usize>>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || rows.is_empty() {
            return Err(Error::shape("masked_mean", format!("x {:?}, {} selections", xv.shape(), rows.len())));
        }
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; rows.len() * d];
        for (j, sel) in rows.iter().enumerate() {
            if sel.is_empty() {
                return Err(Error::Invalid(format!("masked_mean: selection {j} is empty")));
            }
            let acc = &mut out[j * d..(j + 1) * d];
            for &r in sel {
                if r >= n {
                    return Err(Error::shape("masked_mean", format!("row {r} out of range for {n} rows")));
                }
                for (o, v) in acc.iter_mut().zip(&xv.data()[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            let c = sel.len() as f64;
            acc.iter_mut().for_each(|o| *o /= c);
        }
        let value = Tensor::new(vec![rows.len(), d], out)?;
        self.push(value, Op::MaskedMean { x, rows }, &[x], "masked_mean")
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: NodeId, perm: &[usize]) -> Result<NodeId> {
        let xv = self.value(x);
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..xv.rank()).collect::<Vec<_>>() {
            return Err(Error::shape("transpose", format!("perm {perm:?} for shape {:?}", xv.shape())));
        }
        let out = permute(xv.data(), xv.shape(), perm);
        let shape = perm.iter().map(|&p| xv.shape()[p]).collect();
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Transpose { x, perm: perm.to_vec() }, &[x], "transpose")
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).clone().reshaped(shape.to_vec())?;
        self.push(value, Op::Reshape { x }, &[x], "reshape")
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum { x }, &[x], "sum")
    }

    /// `-sum_j target_j * log softmax(logits)_j` over the flattened logits.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, target: &[f64]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.numel() != target.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?}, {} targets", lv.shape(), target.len()),
            ));
        }
        if target.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { op: "softmax_cross_entropy" });
        }
        let mut probs = lv.data().to_vec();
        softmax_in_place(&mut probs);
        let lse = log_sum_exp(lv.data());
        let loss = -target.iter().zip(lv.data()).map(|(t, z)| t * (z - lse)).sum::<f64>();
        let op = Op::SoftmaxXent { logits, target: target.to_vec(), probs };
        self.push(Tensor::scalar(loss), op, &[logits], "softmax_cross_entropy")
    }

    /// Summed logistic binary cross-entropy with log arguments clamped at 1e-12.
    pub fn sigmoid_bce(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.numel() != targets.len() {
            return Err(Error::shape("sigmoid_bce", format!("logits {:?}, {} targets", lv.shape(), targets.len())));
        }
        if targets.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { op: "sigmoid_bce" });
        }
        let loss = lv.data().iter().zip(targets).map(|(&f, &y)| bce_term(f, y)).sum();
        let op = Op::SigmoidBce { logits, targets: targets.to_vec() };
        self.push(Tensor::scalar(loss), op, &[logits], "sigmoid_bce")
    }

    /// Gradients of the scalar `loss` with respect to every registered
    /// parameter. Parameters that do not reach `loss` get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<BTreeMap<String, Tensor>> {
        if !self.tracing {
            return Err(Error::Invalid("backward on a graph built without tracing".into()));
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
        }
        let mut out = BTreeMap::new();
        for (name, id) in &self.params {
            let shape = self.value(*id).shape();
            let g = grads.get(id.0).and_then(|g| g.clone());
            let t = match g {
                Some(data) => Tensor::new(shape.to_vec(), data)?,
                None => Tensor::zeros(shape),
            };
            out.insert(name.clone(), t);
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; self.nodes[id.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, batch, n, k, m, shared_b } => {
                let av = self.value(a).data();
                let bv = self.value(b).data();
                self.accumulate(grads, a, |ga| {
                    for t in 0..batch {
                        let boff = if shared_b { 0 } else { t * k * m };
                        gemm_a_bt(
                            &g[t * n * m..(t + 1) * n * m],
                            &bv[boff..boff + k * m],
                            &mut ga[t * n * k..(t + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                });
                self.accumulate(grads, b, |gb| {
                    for t in 0..batch {
                        let boff = if shared_b { 0 } else { t * k * m };
                        gemm_at_b(
                            &av[t * n * k..(t + 1) * n * k],
                            &g[t * n * m..(t + 1) * n * m],
                            &mut gb[boff..boff + k * m],
                            n,
                            k,
                            m,
                        );
                    }
                });
            }
            Op::Add { a, b, a_map, b_map } => {
                self.accumulate(grads, *a, |ga| scatter(g, a_map, ga, |gi, _| gi));
                self.accumulate(grads, *b, |gb| scatter(g, b_map, gb, |gi, _| gi));
            }
            Op::Mul { a, b, a_map, b_map } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| scatter(g, a_map, ga, |gi, i| gi * bv[map_at(b_map, i)]));
                self.accumulate(grads, *b, |gb| scatter(g, b_map, gb, |gi, i| gi * av[map_at(a_map, i)]));
            }
            &Op::Scale { x, s } => {
                self.accumulate(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(o, gi)| *o += gi * s));
            }
            &Op::Gelu { x } => {
                let xv = self.value(x).data();
                self.accumulate(grads, x, |gx| {
                    for ((o, gi), &v) in gx.iter_mut().zip(g).zip(xv) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            &Op::Softmax { x } => {
                let cols = *out.shape().last().unwrap();
                self.accumulate(grads, x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(cols).zip(g.chunks(cols)).zip(out.data().chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((o, gi), yi) in gxr.iter_mut().zip(gr).zip(yr) {
                            *o += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = *out.shape().last().unwrap();
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *x, |gx| {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..d {
                            let dh = gr[c] * gam[c];
                            mean_dh += dh;
                            mean_dh_h += dh * hr[c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = gr[c] * gam[c];
                            gx[r * d + c] += rs * (dh - mean_dh - hr[c] * mean_dh_h);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |gg| {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(o, gi)| *o += gi);
                    }
                });
            }
            Op::Gather { table, ids } => {
                let d = out.shape()[1];
                self.accumulate(grads, *table, |gt| {
                    for (r, &i) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::MaskedMean { x, rows } => {
                let d = out.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for (j, sel) in rows.iter().enumerate() {
                        let c = sel.len() as f64;
                        for &r in sel {
                            for col in 0..d {
                                gx[r * d + col] += g[j * d + col] / c;
                            }
                        }
                    }
                });
            }
            Op::Transpose { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let back = permute(g, out.shape(), &inv);
                self.accumulate(grads, *x, |gx| gx.iter_mut().zip(&back).for_each(|(o, v)| *o += v));
            }
            &Op::Reshape { x } => {
                self.accumulate(grads, x, |gx| gx.iter_mut().zip(g).for_each(|(o, v)| *o += v));
            }
            &Op::Sum { x } => {
                self.accumulate(grads, x, |gx| gx.iter_mut().for_each(|o| *o += g[0]));
            }
            Op::SoftmaxXent { logits, target, probs } => {
                let mass: f64 = target.iter().sum();
                self.accumulate(grads, *logits, |gl| {
                    for ((o, p), t) in gl.iter_mut().zip(probs).zip(target) {
                        *o += g[0] * (mass * p - t);
                    }
                });
            }
            Op::SigmoidBce { logits, targets } => {
                let lv = self.value(*logits).data();
                self.accumulate(grads, *logits, |gl| {
                    for ((o, &f), &y) in gl.iter_mut().zip(lv).zip(targets) {
                        *o += g[0] * bce_grad(f, y);
                    }
                });
            }
        }
    }

    fn broadcast(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(Vec<usize>, Option<Vec<usize>>, Option<Vec<usize>>)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let rank = sa.len().max(sb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(sa), pad(sb));
        let mut shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            shape.push(match (x, y) {
                _ if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::shape(op, format!("cannot broadcast {sa:?} with {sb:?}"))),
            });
        }
        let a_map = (pa != shape).then(|| broadcast_map(&shape, &pa));
        let b_map = (pb != shape).then(|| broadcast_map(&shape, &pb));
        Ok((shape, a_map, b_map))
    }
}

/// For each flat index of `out_shape`, the flat index into a tensor of
/// (rank-padded) shape `in_shape` that broadcasts onto it.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let in_strides = strides(in_shape);
    let eff: Vec<usize> = in_shape.iter().zip(&in_strides).map(|(&s, &st)| if s == 1 { 0 } else { st }).collect();
    let numel: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..numel {
        map.push(off);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

fn map_at(map: &Option<Vec<usize>>, i: usize) -> usize {
    map.as_ref().map_or(i, |m| m[i])
}

fn binary_apply(
    shape: &[usize],
    a: &[f64],
    a_map: &Option<Vec<usize>>,
    b: &[f64],
    b_map: &Option<Vec<usize>>,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let numel: usize = shape.iter().product();
    (0..numel).map(|i| f(a[map_at(a_map, i)], b[map_at(b_map, i)])).collect()
}

fn scatter(g: &[f64], map: &Option<Vec<usize>>, dst: &mut [f64], f: impl Fn(f64, usize) -> f64) {
    for (i, &gi) in g.iter().enumerate() {
        dst[map_at(map, i)] += f(gi, i);
    }
}

fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

/// `c += a[n,k] * b[k,m]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[n,k] += a[n,m] * b[k,m]^T`
fn gemm_a_bt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, m: usize, k: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for p in 0..k {
            let brow = &b[p * m..(p + 1) * m];
            c[i * k + p] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[k,m] += a[n,k]^T * b[n,m]`
fn gemm_at_b(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * m..(p + 1) * m];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Logistic function evaluated without overflow.
pub(crate) fn sigmoid(f: f64) -> f64 {
    if f >= 0.0 {
        1.0 / (1.0 + (-f).exp())
    } else {
        let e = f.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn bce_term(f: f64, y: f64) -> f64 {
    let p = sigmoid(f).max(LOG_CLAMP);
    let q = sigmoid(-f).max(LOG_CLAMP);
    -(y * p.ln() + (1.0 - y) * q.ln())
}

fn bce_grad(f: f64, y: f64) -> f64 {
    let p = sigmoid(f);
    let q = sigmoid(-f);
    // d/df ln p = q and d/df ln q = -p, each zero where its clamp is active
    let dlp = if p >= LOG_CLAMP { q } else { 0.0 };
    let dlq = if q >= LOG_CLAMP { -p } else { 0.0 };
    -(y * dlp + (1.0 - y) * dlq)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::matrix(2, 2, vec![1., 2., 3., 4.]).unwrap()).unwrap();
        let i = g.constant(Tensor::matrix(2, 2, vec![1., 0., 0., 1.]).unwrap()).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);
        assert_eq!(g.matmul_flops(), 8);
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] x [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_symmetric() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0])).unwrap();
        let s = g.softmax(x).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_standardizes() {
        // mean 4, population variance 8/3
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![2.0, 4.0, 6.0])).unwrap();
        let gamma = g.constant(Tensor::filled(&[3], 1.0)).unwrap();
        let beta = g.constant(Tensor::zeros(&[3])).unwrap();
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let s = (8.0f64 / 3.0).sqrt();
        assert!(close(g.value(y).data(), &[-2.0 / s, 0.0, 2.0 / s], 1e-10));
        let v = g.value(y).data();
        let mean = v.iter().sum::<f64>() / 3.0;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn masked_mean_single_row_is_exact() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::matrix(3, 2, vec![0.1, 0.7, 1.3, -2.9, 5.5, 0.3]).unwrap()).unwrap();
        let mask = Tensor::matrix(1, 3, vec![0.0, 1.0, 0.0]).unwrap();
        let y = g.masked_mean(x, &mask).unwrap();
        assert_eq!(g.value(y).data(), &[1.3, -2.9]);
    }

    #[test]
    fn masked_mean_rejects_empty_selection() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let mask = Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap();
        assert!(g.masked_mean(x, &mask).is_err());
    }

    #[test]
    fn broadcast_add_bias_and_reduction() {
        let mut g = Graph::new();
        let x = g.param("x", Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap()).unwrap();
        let b = g.param("b", Tensor::vector(vec![10., 20., 30.])).unwrap();
        let y = g.add(x, b).unwrap();
        assert_eq!(g.value(y).data(), &[11., 22., 33., 14., 25., 36.]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["b"].data(), &[2., 2., 2.]);
        assert_eq!(grads["x"].data(), &[1.; 6]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(g.add(x, b).is_err());
    }

    #[test]
    fn transpose_and_inverse() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = g.constant(Tensor::new(vec![2, 3, 4], data.clone()).unwrap()).unwrap();
        let t = g.transpose(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(t), &[4, 2, 3]);
        // out[c][a][b] = in[a][b][c]
        assert_eq!(g.value(t).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = g.transpose(t, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
    }

    #[test]
    fn linear_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::vector(vec![0.3, -1.0, 2.0])).unwrap();
        let x = g.constant(Tensor::vector(vec![4.0, 5.0, -6.0])).unwrap();
        let p = g.mul(w, x).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["w"].data(), &[4.0, 5.0, -6.0]);
    }

    #[test]
    fn softmax_ce_gradient_is_softmax_minus_onehot() {
        let logits = [0.5, -1.0, 2.0, 0.0];
        let mut g = Graph::new();
        let z = g.param("z", Tensor::vector(logits.to_vec())).unwrap();
        let loss = g.softmax_cross_entropy(z, &[0.0, 0.0, 1.0, 0.0]).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut p = logits.to_vec();
        softmax_in_place(&mut p);
        p[2] -= 1.0;
        assert!(close(grads["z"].data(), &p, 1e-15));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let _unused = g.param("u", Tensor::vector(vec![3.0])).unwrap();
        let loss = g.sum(w).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["u"].data(), &[0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.param("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_inputs_rejected() {
        let mut g = Graph::new();
        assert!(g.constant(Tensor::vector(vec![f64::NAN])).is_err());
        let x = g.constant(Tensor::vector(vec![1e200])).unwrap();
        assert!(matches!(g.mul(x, x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn inference_graph_cannot_backprop() {
        let mut g = Graph::inference();
        let w = g.param("w", Tensor::vector(vec![1.0])).unwrap();
        let s = g.sum(w).unwrap();
        assert!(g.backward(s).is_err());
    }

    #[test]
    fn bce_clamps_at_perfect_prediction() {
        // sigma(40) rounds to 1 - 4e-18; the clamp keeps the log finite
        assert!(bce_term(40.0, 1.0) < 1e-12);
        assert!((bce_term(0.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_term(-40.0, 1.0) <= -(LOG_CLAMP.ln()) + 1e-9);
    }
}
