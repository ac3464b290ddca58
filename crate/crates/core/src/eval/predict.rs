//! Model-backed decoding, ranked predictions and attention export.

use std::cell::RefCell;
use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::beam::{beam_search, greedy, Hypothesis, Scorer};
use super::porter::stem_phrase;
use crate::data::instance::EncodedPost;
use crate::data::vocab::{Vocabulary, BOS_ID, EOS_ID};
use crate::error::Result;
use crate::model::{Aggregation, AttentionRecord, Model, Prepared};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Steps the decoder of `model` for one post on a gradient-free tape.
pub struct ModelScorer<'a, T: Scalar> {
    model: &'a Model<T>,
    tape: RefCell<Tape<T>>,
    prep: Prepared,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a Model<T>, vocab: &Vocabulary, post: &EncodedPost, agg: Aggregation) -> Result<Self> {
        let mut tape = Tape::no_grad();
        let prep = model.prepare(&mut tape, post, vocab, agg, None)?;
        Ok(Self {
            model,
            tape: RefCell::new(tape),
            prep,
        })
    }

    pub fn prepared(&self) -> &Prepared {
        &self.prep
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    type State = Var;

    fn start(&self) -> Result<Var> {
        Ok(self.model.init_decoder(&self.prep))
    }

    fn step(&self, state: &Var, token: Option<usize>) -> Result<(Var, Vec<f64>)> {
        let input = token.map_or(BOS_ID, |t| self.prep.ext.input_id(t));
        let mut tape = self.tape.borrow_mut();
        let out = self.model.decode_step(&mut tape, &self.prep, *state, input)?;
        let lp = tape.value(out.p_unf).data().iter().map(|p| p.as_f64().ln()).collect();
        Ok((out.state, lp))
    }
}

/// Ranked keyphrases for one post.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub keyphrases: Vec<String>,
    pub scores: Vec<f64>,
}

/// Decoding options.
#[derive(Clone, Copy, Debug)]
pub struct DecodeOptions {
    pub beam: usize,
    pub top_k: usize,
    pub max_len: usize,
    pub agg: Aggregation,
}

fn to_prediction<T: Scalar>(
    id: &str,
    hyps: Vec<Hypothesis>,
    scorer: &ModelScorer<'_, T>,
    vocab: &Vocabulary,
    top_k: usize,
) -> Prediction {
    let mut seen = HashSet::new();
    let mut out = Prediction {
        id: id.to_string(),
        keyphrases: Vec::new(),
        scores: Vec::new(),
    };
    for h in hyps {
        let words: Vec<&str> = h
            .tokens
            .iter()
            .filter(|&&t| t != EOS_ID)
            .map(|&t| scorer.prep.ext.token(&vocab.gen, t))
            .collect();
        if words.is_empty() {
            continue;
        }
        let phrase = words.join(" ");
        if seen.insert(stem_phrase(&phrase)) {
            out.keyphrases.push(phrase);
            out.scores.push(h.score);
        }
        if out.keyphrases.len() == top_k {
            break;
        }
    }
    out
}

/// Beam search for one post, stem-deduplicated and cut to `top_k`.
pub fn predict<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    post: &EncodedPost,
    opts: DecodeOptions,
) -> Result<Prediction> {
    let scorer = ModelScorer::new(model, vocab, post, opts.agg)?;
    let hyps = beam_search(&scorer, opts.beam, opts.max_len, EOS_ID)?;
    Ok(to_prediction(&post.id, hyps, &scorer, vocab, opts.top_k))
}

/// Greedy decoding for one post.
pub fn predict_greedy<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    post: &EncodedPost,
    max_len: usize,
    agg: Aggregation,
) -> Result<Prediction> {
    let scorer = ModelScorer::new(model, vocab, post, agg)?;
    let hyps = greedy(&scorer, max_len, EOS_ID)?.into_iter().collect();
    Ok(to_prediction(&post.id, hyps, &scorer, vocab, usize::MAX))
}

/// Predictions for many posts, in input order.
pub fn predict_all<T: Scalar>(
    model: &Model<T>,
    vocab: &Vocabulary,
    posts: &[EncodedPost],
    opts: DecodeOptions,
) -> Result<Vec<Prediction>> {
    posts.par_iter().map(|p| predict(model, vocab, p, opts)).collect()
}

/// Attention weights of every co-attention head for one post.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionExport {
    pub id: String,
    pub stacks: Vec<AttentionRecord>,
}

pub fn export_attention<T: Scalar>(model: &Model<T>, post: &EncodedPost) -> Result<AttentionExport> {
    let mut tape = Tape::no_grad();
    let mut stacks = Vec::new();
    model.encode(&mut tape, post, Some(&mut stacks))?;
    Ok(AttentionExport {
        id: post.id.clone(),
        stacks,
    })
}
