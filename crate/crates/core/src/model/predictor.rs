//! Keyphrase classifier, attentive GRU decoder and the unified copy
//! distribution over generated, source and classifier-output tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::vocab::{TokenVocab, UNK_ID};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Weights `(a, b)` of the source-copy and classifier-copy distributions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregation {
    pub a: f64,
    pub b: f64,
}

impl Aggregation {
    /// Source copying only (classifier path off).
    pub const SOURCE_ONLY: Aggregation = Aggregation { a: 1.0, b: 0.0 };
    pub const BALANCED: Aggregation = Aggregation { a: 0.5, b: 0.5 };

    pub fn new(a: f64, b: f64) -> Result<Self> {
        let agg = Aggregation { a, b };
        agg.check()?;
        Ok(agg)
    }

    pub fn check(&self) -> Result<()> {
        if !(self.a >= 0.0 && self.b >= 0.0) || (self.a + self.b - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "aggregation weights must be non-negative and sum to 1, got a={} b={}",
                self.a, self.b
            )));
        }
        Ok(())
    }
}

/// Label ids of the `k` largest logits, highest first; ties go to the
/// lower id.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..logits.len()).collect();
    ids.sort_by(|&i, &j| logits[j].total_cmp(&logits[i]).then(i.cmp(&j)));
    ids.truncate(k);
    ids
}

/// Word-level distribution over the tokens of the retrieved labels.
///
/// `lengths[r]` is the token count of the label ranked `r`. The retrieved
/// logits are softmax-normalized, each token inherits its label's
/// probability, and the repeated vector is renormalized.
pub fn build_beta<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    ranked: &[usize],
    lengths: &[usize],
) -> Result<Var> {
    if ranked.is_empty() || ranked.len() != lengths.len() || lengths.contains(&0) {
        return Err(Error::contract("β needs at least one non-empty retrieved label"));
    }
    let picked = tape.gather(logits, ranked)?;
    let p = tape.softmax_last(picked)?;
    let parent: Vec<usize> = lengths
        .iter()
        .enumerate()
        .flat_map(|(r, &n)| std::iter::repeat_n(r, n))
        .collect();
    let rep = tape.gather(p, &parent)?;
    let total = tape.sum(rep);
    tape.div(rep, total)
}

/// Generation vocabulary plus per-instance slots for out-of-vocabulary
/// tokens reachable by copying.
#[derive(Clone, Debug)]
pub struct ExtendedVocab {
    gen_size: usize,
    extra: Vec<String>,
    index: HashMap<String, usize>,
}

impl ExtendedVocab {
    /// Slots are added in order of first appearance, source tokens first.
    pub fn new<'a>(gen: &TokenVocab, copyable: impl IntoIterator<Item = &'a String>) -> Self {
        let mut ext = Self {
            gen_size: gen.len(),
            extra: Vec::new(),
            index: HashMap::new(),
        };
        for t in copyable {
            if !gen.contains(t) && !ext.index.contains_key(t) {
                ext.index.insert(t.clone(), gen.len() + ext.extra.len());
                ext.extra.push(t.clone());
            }
        }
        ext
    }

    pub fn len(&self) -> usize {
        self.gen_size + self.extra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn gen_size(&self) -> usize {
        self.gen_size
    }

    pub fn extra(&self) -> &[String] {
        &self.extra
    }

    pub fn id(&self, gen: &TokenVocab, token: &str) -> Option<usize> {
        gen.id(token).or_else(|| self.index.get(token).copied())
    }

    /// Extended id of `token`, `<unk>` when no slot covers it.
    pub fn target_id(&self, gen: &TokenVocab, token: &str) -> usize {
        self.id(gen, token).unwrap_or(UNK_ID)
    }

    pub fn token<'a>(&'a self, gen: &'a TokenVocab, id: usize) -> &'a str {
        if id < self.gen_size {
            gen.token(id)
        } else {
            &self.extra[id - self.gen_size]
        }
    }

    /// Generation id used to embed `id` as the next decoder input.
    pub fn input_id(&self, id: usize) -> usize {
        if id < self.gen_size {
            id
        } else {
            UNK_ID
        }
    }
}

/// Copy sources of one instance, resolved to extended ids.
#[derive(Clone, Debug)]
pub struct CopyIndex {
    pub source: Vec<usize>,
    pub retrieved: Vec<usize>,
}

/// `P_unf = λ·P_gen + (1−λ)·(a·Σα + b·Σβ)` scattered over the extended
/// vocabulary. A copy source whose weight is zero is left out entirely.
#[allow(clippy::too_many_arguments)]
pub fn unify<T: Scalar>(
    tape: &mut Tape<T>,
    p_gen: Var,
    lambda: Var,
    alpha: Var,
    beta: Var,
    index: &CopyIndex,
    agg: Aggregation,
    size: usize,
) -> Result<Var> {
    agg.check()?;
    let n_gen = tape.value(p_gen).numel();
    let gen_ids: Vec<usize> = (0..n_gen).collect();
    let pg = tape.scatter_add(p_gen, &gen_ids, size)?;
    let mut mix = None;
    if agg.a > 0.0 {
        let src = tape.scatter_add(alpha, &index.source, size)?;
        mix = Some(tape.scale(src, T::of_f64(agg.a)));
    }
    if agg.b > 0.0 {
        let w = tape.scatter_add(beta, &index.retrieved, size)?;
        let w = tape.scale(w, T::of_f64(agg.b));
        mix = Some(match mix {
            Some(m) => tape.add(m, w)?,
            None => w,
        });
    }
    let mix = mix.ok_or_else(|| Error::contract("both aggregation weights are zero"))?;
    let gen_part = tape.mul(pg, lambda)?;
    let rest = tape.one_minus(lambda);
    let copy_part = tape.mul(mix, rest)?;
    tape.add(gen_part, copy_part)
}
