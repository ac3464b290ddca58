//! Dataset loading, normalization, vocabularies and instance encoding.

pub mod instance;
pub mod normalize;
pub mod post;
pub mod sidecar;
pub mod synth;
pub mod vocab;

pub use instance::{append_ocr, encode_post, replicate_instances, EncodedPost, Label, Mode, TrainingInstance};
pub use normalize::{canonical_keyphrase, normalize_tokens};
pub use post::{filter_rare_keyphrases, load_dataset, write_dataset, LoadOptions, Post, VisualShape};
pub use synth::{synth_corpus, Population};
pub use vocab::{build_vocab, LabelVocab, TokenVocab, Vocabulary};
