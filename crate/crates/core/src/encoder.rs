//! Pre-norm transformer encoder over `[CLS] query [SEP] union [PAD]...`.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor, PAD_LOGIT};
use crate::tokenizer::{TokenId, TokenSequence, CLS, PAD, SEP};
use crate::union::UnionEncoding;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub vocab_size: usize,
}

impl EncoderConfig {
    /// Two layers, d = 64, four heads, feed-forward 256.
    pub fn desk(vocab_size: usize, max_positions: usize) -> Self {
        EncoderConfig { layers: 2, d_model: 64, heads: 4, ff_dim: 256, max_positions, vocab_size }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.d_model > 0
            && self.heads > 0
            && self.d_model.is_multiple_of(self.heads)
            && self.ff_dim > 0
            && self.max_positions >= 2
            && self.vocab_size >= 4;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid encoder config {self:?}")))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Named trainable tensors of the encoder and the shared classifier `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelParams(BTreeMap<String, Tensor>);

pub const TOKEN_EMBEDDING: &str = "embed.tokens";
pub const POSITION_EMBEDDING: &str = "embed.positions";
pub const CLASSIFIER: &str = "classifier.w";

fn layer_key(layer: usize, part: &str) -> String {
    format!("layer{layer}.{part}")
}

impl ModelParams {
    /// Normal(0, 0.02) weights, zero biases, unit layer-norm gains.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, ff) = (config.d_model, config.ff_dim);
        let mut p = BTreeMap::new();
        let mut put = |name: String, t: Tensor| {
            p.insert(name, t);
        };
        put(TOKEN_EMBEDDING.into(), Tensor::randn(&[config.vocab_size, d], INIT_STD, &mut rng));
        put(POSITION_EMBEDDING.into(), Tensor::randn(&[config.max_positions, d], INIT_STD, &mut rng));
        for l in 0..config.layers {
            put(layer_key(l, "ln1.gamma"), Tensor::filled(&[d], 1.0));
            put(layer_key(l, "ln1.beta"), Tensor::zeros(&[d]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                put(layer_key(l, w), Tensor::randn(&[d, d], INIT_STD, &mut rng));
            }
            for b in ["attn.bq", "attn.bk", "attn.bv", "attn.bo"] {
                put(layer_key(l, b), Tensor::zeros(&[d]));
            }
            put(layer_key(l, "ln2.gamma"), Tensor::filled(&[d], 1.0));
            put(layer_key(l, "ln2.beta"), Tensor::zeros(&[d]));
            put(layer_key(l, "ff.w1"), Tensor::randn(&[d, ff], INIT_STD, &mut rng));
            put(layer_key(l, "ff.b1"), Tensor::zeros(&[ff]));
            put(layer_key(l, "ff.w2"), Tensor::randn(&[ff, d], INIT_STD, &mut rng));
            put(layer_key(l, "ff.b2"), Tensor::zeros(&[d]));
        }
        put(CLASSIFIER.into(), Tensor::randn(&[d], INIT_STD, &mut rng));
        Ok(ModelParams(p))
    }

    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ModelParams(map)
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor> {
        &self.0
    }

    pub fn as_map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.0
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.0
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.0.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn scalar_count(&self) -> usize {
        self.0.values().map(Tensor::numel).sum()
    }

    /// Every tensor present with the shape `config` implies.
    pub fn check_shapes(&self, config: &EncoderConfig) -> Result<()> {
        let expected = ModelParams::init(config, 0)?;
        for (name, t) in &expected.0 {
            let have = self.get(name)?;
            if have.shape() != t.shape() {
                return Err(Error::shape(
                    "params",
                    format!("{name}: expected {:?}, found {:?}", t.shape(), have.shape()),
                ));
            }
        }
        Ok(())
    }

    /// Register every tensor as a graph parameter.
    pub fn register(&self, g: &mut Graph) -> Result<ParamNodes> {
        let mut nodes = BTreeMap::new();
        for (name, t) in &self.0 {
            nodes.insert(name.clone(), g.param(name.clone(), t.clone())?);
        }
        Ok(ParamNodes(nodes))
    }
}

/// Graph handles for a registered [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ParamNodes(BTreeMap<String, NodeId>);

impl ParamNodes {
    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.0.get(name).copied().ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    fn layer(&self, l: usize, part: &str) -> Result<NodeId> {
        self.get(&layer_key(l, part))
    }
}

/// Span boundaries inside an assembled encoder input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanIndex {
    pub cls: usize,
    pub query: Range<usize>,
    pub sep: usize,
    /// Union tokens (joint input) or item tokens (pointwise input).
    pub tail: Range<usize>,
    pub padding: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderInput {
    pub ids: Vec<TokenId>,
    pub valid: Vec<u8>,
    pub spans: SpanIndex,
}

impl EncoderInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.spans.padding.start
    }
}

/// `[CLS] query [SEP] tail [PAD]...` padded to `max_len`.
pub fn assemble_tokens(query: &[TokenId], tail: &[TokenId], max_len: usize) -> Result<EncoderInput> {
    let required = 2 + query.len() + tail.len();
    if required > max_len {
        return Err(Error::Overflow { required, max_len });
    }
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS);
    ids.extend_from_slice(query);
    ids.push(SEP);
    ids.extend_from_slice(tail);
    ids.resize(max_len, PAD);
    let mut valid = vec![1u8; required];
    valid.resize(max_len, 0);
    let q_end = 1 + query.len();
    let spans = SpanIndex {
        cls: 0,
        query: 1..q_end,
        sep: q_end,
        tail: q_end + 1..required,
        padding: required..max_len,
    };
    Ok(EncoderInput { ids, valid, spans })
}

/// Joint input: query followed by the sorted union.
pub fn assemble_input(query: &TokenSequence, union: &UnionEncoding, max_len: usize) -> Result<EncoderInput> {
    assemble_tokens(&query.ids, &union.union_ids, max_len)
}

/// Encoder output rows, one per input position.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextEmbeddings {
    pub matrix: Tensor,
    pub spans: SpanIndex,
}

/// Record the encoder forward on `g`, returning the `[n, d]` output node.
pub fn encode_graph(g: &mut Graph, p: &ParamNodes, config: &EncoderConfig, input: &EncoderInput) -> Result<NodeId> {
    let n = input.len();
    if n > config.max_positions {
        return Err(Error::Overflow { required: n, max_len: config.max_positions });
    }
    let ids: Vec<usize> = input.ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..n).collect();
    let tok = g.gather(p.get(TOKEN_EMBEDDING)?, &ids)?;
    let pos = g.gather(p.get(POSITION_EMBEDDING)?, &positions)?;
    let mut x = g.add(tok, pos)?;

    let key_mask = if input.valid.iter().all(|&v| v == 1) {
        None
    } else {
        let m = input.valid.iter().map(|&v| if v == 1 { 0.0 } else { PAD_LOGIT }).collect();
        Some(g.constant(Tensor::new(vec![1, 1, n], m)?)?)
    };

    let (d, h, dh) = (config.d_model, config.heads, config.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    for l in 0..config.layers {
        let a = g.layer_norm(x, p.layer(l, "ln1.gamma")?, p.layer(l, "ln1.beta")?, LN_EPS)?;
        let proj = |g: &mut Graph, w: &str, b: &str| -> Result<NodeId> {
            let y = g.matmul(a, p.layer(l, w)?)?;
            g.add(y, p.layer(l, b)?)
        };
        let q = proj(g, "attn.wq", "attn.bq")?;
        let k = proj(g, "attn.wk", "attn.bk")?;
        let v = proj(g, "attn.wv", "attn.bv")?;
        let q = g.reshape(q, &[n, h, dh])?;
        let q = g.transpose(q, &[1, 0, 2])?;
        let k = g.reshape(k, &[n, h, dh])?;
        let kt = g.transpose(k, &[1, 2, 0])?;
        let v = g.reshape(v, &[n, h, dh])?;
        let v = g.transpose(v, &[1, 0, 2])?;
        let scores = g.matmul(q, kt)?;
        let mut scores = g.scale(scores, scale)?;
        if let Some(m) = key_mask {
            scores = g.add(scores, m)?;
        }
        let probs = g.softmax(scores)?;
        let ctx = g.matmul(probs, v)?;
        let ctx = g.transpose(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, &[n, d])?;
        let out = g.matmul(ctx, p.layer(l, "attn.wo")?)?;
        let out = g.add(out, p.layer(l, "attn.bo")?)?;
        x = g.add(x, out)?;

        let b = g.layer_norm(x, p.layer(l, "ln2.gamma")?, p.layer(l, "ln2.beta")?, LN_EPS)?;
        let hid = g.matmul(b, p.layer(l, "ff.w1")?)?;
        let hid = g.add(hid, p.layer(l, "ff.b1")?)?;
        let hid = g.gelu(hid)?;
        let out = g.matmul(hid, p.layer(l, "ff.w2")?)?;
        let out = g.add(out, p.layer(l, "ff.b2")?)?;
        x = g.add(x, out)?;
    }
    Ok(x)
}

/// Evaluate the encoder without recording gradients.
pub fn encode(input: &EncoderInput, params: &ModelParams, config: &EncoderConfig) -> Result<ContextEmbeddings> {
    params.check_shapes(config)?;
    let mut g = Graph::inference();
    let nodes = params.register(&mut g)?;
    let out = encode_graph(&mut g, &nodes, config, input)?;
    Ok(ContextEmbeddings { matrix: g.value(out).clone(), spans: input.spans.clone() })
}

/// Fixed sin/cos encoding of `pos` in `d` dimensions.
pub fn sinusoid(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Context rows selected for item `j` with the sinusoid of each union
/// token's first position inside item `j` added. Query and `[SEP]` rows
/// pass through unchanged. Returns `(row index, vector)` pairs in row order.
pub fn reinject_positional(
    e: &ContextEmbeddings,
    union: &UnionEncoding,
    j: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    let d = *e.matrix.shape().last().unwrap();
    let mut out = Vec::new();
    for r in e.spans.query.clone() {
        out.push((r, e.matrix.row(r).to_vec()));
    }
    out.push((e.spans.sep, e.matrix.row(e.spans.sep).to_vec()));
    for (m, &bit) in union.union_span(j).iter().enumerate() {
        if bit == 0 {
            continue;
        }
        let pos = union.item_positions[j][m]
            .ok_or_else(|| Error::Invalid(format!("item {j} has no position for union token {m}")))?;
        let r = e.spans.tail.start + m;
        let row = e.matrix.row(r).iter().zip(sinusoid(pos, d)).map(|(a, b)| a + b).collect();
        out.push((r, row));
    }
    Ok(out)
}
