//! Cross-media keyphrase prediction: a Bi-GRU text encoder, pooled-query
//! multi-head co-attention over text, image regions and image attributes,
//! and a decoder that mixes generation, source copying and copying from
//! the classifier's top predictions.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{DataConfig, EvalConfig, RunConfig};
pub use error::{Error, Result};
pub use model::{Aggregation, Model, ModelConfig};
pub use params::{Init, ParamId, ParamStore};
pub use tape::{Gradients, PoolMode, Tape, Var};
pub use tensor::{Scalar, Tensor};
pub use train::TrainConfig;
