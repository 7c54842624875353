//! Training, evaluation, cost accounting and synthetic data around the
//! joint ranker.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod dataset;
pub mod eval;
pub mod synth;
pub mod train;

pub use bench::{bench, MeasuredCost};
pub use checkpoint::Checkpoint;
pub use config::{Schedule, TrainConfig};
pub use cost::{cost_model, encoder_matmul_flops, AnalyticCost, CostReport};
pub use dataset::{load_dataset, RankingInstance, RawInstance};
pub use eval::{evaluate, EvalOptions, EvalReport};
pub use synth::{synth_dataset, SynthSpec};
pub use train::{train, TrainOutcome};
