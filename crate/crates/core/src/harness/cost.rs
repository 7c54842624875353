//! Analytic attention-cost model and exact encoder matmul FLOP counts.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::harness::bench::MeasuredCost;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalyticCost {
    pub l_q: f64,
    pub l_k: f64,
    pub n: f64,
    pub c: f64,
    pub layers: f64,
    /// `(L_q + L_k N / C)^2 L`
    pub joint: f64,
    /// `(L_q + L_k)^2 L N`
    pub pointwise: f64,
    pub ratio: f64,
}

impl AnalyticCost {
    pub const CSV_HEADER: &'static str = "L_q,L_k,N,C,L,joint,pointwise,ratio";

    pub fn csv_row(&self) -> String {
        [self.l_q, self.l_k, self.n, self.c, self.layers, self.joint, self.pointwise, self.ratio]
            .map(|v| v.to_string())
            .join(",")
    }
}

pub fn cost_model(l_q: f64, l_k: f64, n: f64, c: f64, layers: f64) -> Result<AnalyticCost> {
    let ok = l_q >= 0.0 && l_k > 0.0 && n > 0.0 && c >= 1.0 && layers > 0.0;
    if !ok || ![l_q, l_k, n, c, layers].iter().all(|v| v.is_finite()) {
        return Err(Error::Invalid(format!(
            "cost model needs L_q >= 0, L_k, N, L > 0 and C >= 1 (got {l_q}, {l_k}, {n}, {c}, {layers})"
        )));
    }
    let joint = (l_q + l_k * n / c).powi(2) * layers;
    let pointwise = (l_q + l_k).powi(2) * layers * n;
    Ok(AnalyticCost { l_q, l_k, n, c, layers, joint, pointwise, ratio: pointwise / joint })
}

/// Matmul multiply-adds of one encoder pass over `n` tokens: per layer the
/// four `d x d` projections, the two `n x n` attention products and the
/// feed-forward pair.
pub fn encoder_matmul_flops(config: &EncoderConfig, n: usize) -> u64 {
    let (n, d, ff) = (n as u64, config.d_model as u64, config.ff_dim as u64);
    config.layers as u64 * (4 * n * d * d + 2 * n * n * d + 2 * n * d * ff)
}

/// Classifier multiply-adds for `items` pooled vectors.
pub fn classifier_flops(config: &EncoderConfig, items: usize) -> u64 {
    (items * config.d_model) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub analytic: AnalyticCost,
    pub measured: Option<MeasuredCost>,
}
