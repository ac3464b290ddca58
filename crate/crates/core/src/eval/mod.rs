//! Decoding and evaluation.

pub mod beam;
pub mod metrics;
pub mod porter;
pub mod predict;

pub use beam::{beam_search, exhaustive, greedy, Hypothesis, Scorer};
pub use metrics::{
    absent_recall_at_5, average_precision_at_5, evaluate, f1_at_k, is_present, keyphrase_match,
    split_present_absent, Bucket, EvalReport, PostResult,
};
pub use porter::{porter_stem, stem_phrase};
pub use predict::{
    export_attention, predict, predict_all, predict_greedy, AttentionExport, DecodeOptions, ModelScorer,
    Prediction,
};
