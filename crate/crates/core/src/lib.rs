//! Joint listwise ranking: one encoder pass over a query and the sorted
//! union of its candidates' tokens, per-item scores by selective pooling,
//! and the losses, metrics and tooling around it.

pub mod encoder;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod ranker;
pub mod tensor;
pub mod tokenizer;
pub mod union;

pub use encoder::{EncoderConfig, ModelParams};
pub use error::{Error, Result};
pub use losses::LossKind;
pub use ranker::{rank, Model};
pub use tensor::{Graph, Tensor};
pub use tokenizer::{TokenSequence, Vocabulary};
pub use union::{build_union, UnionEncoding};
