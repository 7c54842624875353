use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::losses::LossKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Decays linearly from the base rate to zero over `steps`.
    Linear,
    Constant,
}

impl std::str::FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Schedule::Linear),
            "constant" => Ok(Schedule::Constant),
            _ => Err(Error::Invalid(format!("unknown schedule `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub steps: usize,
    /// Whole queries per step.
    pub batch_size: usize,
    /// Items kept per query (the first `n_items`).
    pub n_items: usize,
    /// Token-union budget `L_u`.
    pub max_union: usize,
    pub encoder: EncoderConfig,
    pub seed: u64,
    pub reinjection: bool,
    /// Sort each item's tokens before pointwise scoring.
    pub sorted_tokens: bool,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Rpl,
            learning_rate: 1e-4,
            schedule: Schedule::Linear,
            steps: 1000,
            batch_size: 8,
            n_items: 10,
            max_union: 128,
            encoder: EncoderConfig::desk(512, 160),
            seed: 0,
            reinjection: false,
            sorted_tokens: false,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("adam_eps", self.adam_eps),
            ("batch_size", self.batch_size as f64),
            ("n_items", self.n_items as f64),
            ("max_union", self.max_union as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::Invalid("weight_decay must be non-negative".into()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Invalid(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        self.encoder.validate()
    }

    /// Learning rate for 0-based `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Linear => self.learning_rate * (1.0 - step as f64 / self.steps.max(1) as f64),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.schedule, Schedule::Linear);
    }

    #[test]
    fn linear_schedule_endpoints() {
        let c = TrainConfig { steps: 4, ..TrainConfig::default() };
        assert_eq!(c.lr_at(0), 1e-4);
        assert_eq!(c.lr_at(2), 5e-5);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = TrainConfig::from_json(r#"{"loss":"listnet","steps":3}"#).unwrap();
        assert_eq!(c.loss, LossKind::ListNet);
        assert_eq!(c.batch_size, 8);
        assert!(TrainConfig::from_json(r#"{"lossy":"x"}"#).is_err());
        assert!(TrainConfig::from_json(r#"{"learning_rate":0}"#).is_err());
    }
}
