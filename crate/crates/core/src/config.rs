//! Run configuration shared by the library and the command line.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Aggregation, ModelConfig};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generation vocabulary size, reserved tokens included.
    pub gen_cap: usize,
    pub min_count: usize,
    /// Training keyphrases seen fewer times are dropped (1 keeps all).
    pub min_keyphrase_count: usize,
    /// Required number of visual rows per post, when set.
    pub visual_rows: Option<usize>,
    /// Optional word-vector file for the embedding table.
    pub embeddings: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            gen_cap: 45_000,
            min_count: 1,
            min_keyphrase_count: 1,
            visual_rows: None,
            embeddings: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beam: usize,
    /// Predictions kept per post.
    pub top_k: usize,
    /// Aggregation weights used at inference.
    pub a: f64,
    pub b: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam: 10,
            top_k: 10,
            a: 0.5,
            b: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn aggregation(&self) -> Result<Aggregation> {
        Aggregation::new(self.a, self.b)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.eval.aggregation()?;
        if self.eval.beam == 0 || self.eval.top_k == 0 {
            return Err(Error::validation("eval", "beam and top_k must be positive"));
        }
        if self.data.min_count == 0 || self.data.min_keyphrase_count == 0 {
            return Err(Error::validation("data", "counts must be positive"));
        }
        Ok(())
    }
}
