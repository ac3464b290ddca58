//! Model-ready encodings and one-keyphrase-per-instance replication.

use super::post::Post;
use super::vocab::{TokenVocab, Vocabulary, SEP};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Classification target of an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Known(usize),
    /// Keyphrase outside the classification vocabulary; the
    /// classification loss is skipped.
    Unseen,
}

/// Whether unknown keyphrases are an error (training) or mapped to
/// [`Label::Unseen`] (validation and test).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One (post, keyphrase) pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingInstance {
    /// Index of the post in the slice the instance was built from.
    pub post: usize,
    pub target: Vec<String>,
    pub label: Label,
}

/// A post with its source sequence and attribute ids resolved.
#[derive(Clone, Debug)]
pub struct EncodedPost {
    pub id: String,
    /// Text tokens followed by `<sep>` and in-vocabulary OCR tokens.
    pub source: Vec<String>,
    pub source_ids: Vec<usize>,
    /// Number of leading source tokens that come from the post text.
    pub text_len: usize,
    pub attr_ids: Vec<usize>,
    pub visual: Option<Tensor<f32>>,
}

/// Appends OCR tokens behind a `<sep>` marker, keeping only tokens that
/// belong to the generation vocabulary.
pub fn append_ocr(text: &[String], ocr: &[String], gen: &TokenVocab) -> Vec<String> {
    let mut out = text.to_vec();
    let kept: Vec<&String> = ocr.iter().filter(|t| gen.contains(t)).collect();
    if !kept.is_empty() {
        out.push(SEP.to_string());
        out.extend(kept.into_iter().cloned());
    }
    out
}

pub fn encode_post(post: &Post, vocab: &Vocabulary) -> Result<EncodedPost> {
    if post.text.is_empty() {
        return Err(Error::validation("text", format!("post `{}` has no text", post.id)));
    }
    let source = append_ocr(&post.text, &post.ocr, &vocab.gen);
    let visual = match &post.visual_features {
        Some(rows) => {
            let dim = rows.first().map_or(0, Vec::len);
            Some(Tensor::new(
                vec![rows.len(), dim],
                rows.iter().flatten().copied().collect(),
            )?)
        }
        None => None,
    };
    Ok(EncodedPost {
        id: post.id.clone(),
        source_ids: vocab.gen.encode(&source),
        source,
        text_len: post.text.len(),
        attr_ids: vocab.gen.encode(&post.attributes),
        visual,
    })
}

/// Builds one instance per (post, keyphrase) pair, in post order.
pub fn replicate_instances(
    posts: &[Post],
    vocab: &Vocabulary,
    mode: Mode,
) -> Result<Vec<TrainingInstance>> {
    let mut out = Vec::with_capacity(posts.iter().map(|p| p.keyphrases.len()).sum());
    for (i, p) in posts.iter().enumerate() {
        for k in &p.keyphrases {
            let label = match (vocab.cls.id(k), mode) {
                (Some(id), _) => Label::Known(id),
                (None, Mode::Eval) => Label::Unseen,
                (None, Mode::Train) => {
                    return Err(Error::validation(
                        "keyphrases",
                        format!("post `{}`: `{k}` is not in the classification vocabulary", p.id),
                    ))
                }
            };
            out.push(TrainingInstance {
                post: i,
                target: k.split_whitespace().map(String::from).collect(),
                label,
            });
        }
    }
    Ok(out)
}
