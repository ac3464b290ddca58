//! Multi-modality multi-head attention: pooled-query co-attention stacks
//! between the text, vision and attribute banks, fused into one context.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{PoolMode, Tape, Var};
use crate::tensor::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Query → memory direction of a co-attention stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "text->vision")]
    TextToVision,
    #[serde(rename = "text->attribute")]
    TextToAttribute,
    #[serde(rename = "vision->text")]
    VisionToText,
    #[serde(rename = "attribute->text")]
    AttributeToText,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::TextToVision,
        Direction::TextToAttribute,
        Direction::VisionToText,
        Direction::AttributeToText,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::TextToVision => "text->vision",
            Direction::TextToAttribute => "text->attribute",
            Direction::VisionToText => "vision->text",
            Direction::AttributeToText => "attribute->text",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Direction::TextToVision => "t2v",
            Direction::TextToAttribute => "t2a",
            Direction::VisionToText => "v2t",
            Direction::AttributeToText => "a2t",
        }
    }

    /// Pooling applied to the query bank: max for text, mean otherwise.
    pub fn query_pool(self) -> PoolMode {
        match self {
            Direction::TextToVision | Direction::TextToAttribute => PoolMode::Max,
            Direction::VisionToText | Direction::AttributeToText => PoolMode::Avg,
        }
    }
}

/// Attention weights of one head over the memory rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub direction: Direction,
    pub layer: usize,
    pub head: usize,
    pub weights: Vec<f64>,
}

/// `softmax(Q Kᵀ / √d_K) V`. Returns the output and the weight matrix.
pub fn scaled_dot_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var)> {
    let (qs, ks, vs) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || qs[1] != ks[1] || ks[0] != vs[0] {
        return Err(Error::dim(format!(
            "attention with Q {qs:?}, K {ks:?}, V {vs:?}"
        )));
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, T::of_f64(1.0 / (qs[1] as f64).sqrt()));
    let weights = tape.softmax_last(scaled)?;
    let out = tape.matmul(weights, v)?;
    Ok((out, weights))
}

#[derive(Clone, Debug)]
pub struct MultiHeadParams {
    pub wq: Vec<ParamId>,
    pub wk: Vec<ParamId>,
    pub wv: Vec<ParamId>,
    pub wo: ParamId,
}

impl MultiHeadParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        heads: usize,
        d_head: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut proj = |kind: &str, rng: &mut R| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|h| store.init(format!("{prefix}.w{kind}.{h}"), vec![d, d_head], Init::FanIn, rng))
                .collect()
        };
        let wq = proj("q", rng)?;
        let wk = proj("k", rng)?;
        let wv = proj("v", rng)?;
        let wo = store.init(format!("{prefix}.wo"), vec![heads * d_head, d], Init::FanIn, rng)?;
        Ok(Self { wq, wk, wv, wo })
    }
}

/// `[head_1; …; head_H] W_O` with `head_h = 𝒜(Q W_Q,h, K W_K,h, V W_V,h)`.
/// Returns the output and each head's weight matrix.
pub fn multi_head<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    p: &MultiHeadParams,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Vec<Var>)> {
    if p.wq.is_empty() || p.wq.len() != p.wk.len() || p.wq.len() != p.wv.len() {
        return Err(Error::dim("multi-head attention needs at least one complete head"));
    }
    let mut outs = Vec::with_capacity(p.wq.len());
    let mut weights = Vec::with_capacity(p.wq.len());
    for h in 0..p.wq.len() {
        let wq = tape.param(store, p.wq[h]);
        let wk = tape.param(store, p.wk[h]);
        let wv = tape.param(store, p.wv[h]);
        let qh = tape.matmul(q, wq)?;
        let kh = tape.matmul(k, wk)?;
        let vh = tape.matmul(v, wv)?;
        let (o, w) = scaled_dot_attention(tape, qh, kh, vh)?;
        outs.push(o);
        weights.push(w);
    }
    let cat = tape.concat(&outs)?;
    let wo = tape.param(store, p.wo);
    Ok((tape.matmul(cat, wo)?, weights))
}

#[derive(Clone, Debug)]
pub struct CoAttentionLayer {
    pub mha: MultiHeadParams,
    pub ln1: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct CoAttentionStack {
    pub direction: Direction,
    pub layers: Vec<CoAttentionLayer>,
}

impl CoAttentionStack {
    #[allow(clippy::too_many_arguments)]
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        direction: Direction,
        n_layers: usize,
        d: usize,
        heads: usize,
        d_head: usize,
        ffn_inner: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let pre = format!("m3h.{}.l{l}", direction.key());
            let mha = MultiHeadParams::register(store, &pre, d, heads, d_head, rng)?;
            let mut ln = |name: &str| -> Result<(ParamId, ParamId)> {
                Ok((
                    store.init(format!("{pre}.{name}.gain"), vec![1, d], Init::Ones, rng)?,
                    store.init(format!("{pre}.{name}.bias"), vec![1, d], Init::Zeros, rng)?,
                ))
            };
            let ln1 = ln("ln1")?;
            let ln2 = ln("ln2")?;
            let ff1 = (
                store.init(format!("{pre}.ff1.w"), vec![d, ffn_inner], Init::FanIn, rng)?,
                store.init(format!("{pre}.ff1.b"), vec![1, ffn_inner], Init::Zeros, rng)?,
            );
            let ff2 = (
                store.init(format!("{pre}.ff2.w"), vec![ffn_inner, d], Init::FanIn, rng)?,
                store.init(format!("{pre}.ff2.b"), vec![1, d], Init::Zeros, rng)?,
            );
            layers.push(CoAttentionLayer {
                mha,
                ln1,
                ff1,
                ff2,
                ln2,
            });
        }
        Ok(Self { direction, layers })
    }

    /// Pools `query_bank` into one query and refines it against `memory`:
    /// per layer `q ← LN(q + MHA(q, M, M))`, then `q ← LN(q + FFN(q))`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        query_bank: Var,
        memory: Var,
        records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        let mut q = tape.pool(query_bank, self.direction.query_pool())?;
        let mut records = records;
        let eps = T::of_f64(LAYER_NORM_EPS);
        for (l, layer) in self.layers.iter().enumerate() {
            let (att, weights) = multi_head(tape, store, &layer.mha, q, memory, memory)?;
            if let Some(rec) = records.as_deref_mut() {
                for (h, w) in weights.iter().enumerate() {
                    rec.push(AttentionRecord {
                        direction: self.direction,
                        layer: l,
                        head: h,
                        weights: tape.value(*w).to_f64_vec(),
                    });
                }
            }
            let res = tape.add(q, att)?;
            let (g, b) = (tape.param(store, layer.ln1.0), tape.param(store, layer.ln1.1));
            q = tape.layer_norm(res, g, b, eps)?;

            let (w1, b1) = (tape.param(store, layer.ff1.0), tape.param(store, layer.ff1.1));
            let (w2, b2) = (tape.param(store, layer.ff2.0), tape.param(store, layer.ff2.1));
            let hid = tape.matmul(q, w1)?;
            let hid = tape.add(hid, b1)?;
            let hid = tape.relu(hid);
            let ff = tape.matmul(hid, w2)?;
            let ff = tape.add(ff, b2)?;
            let res = tape.add(q, ff)?;
            let (g, b) = (tape.param(store, layer.ln2.0), tape.param(store, layer.ln2.1));
            q = tape.layer_norm(res, g, b, eps)?;
        }
        Ok(q)
    }
}

/// All four stacks plus the linear fusion layer.
#[derive(Clone, Debug)]
pub struct M3hParams {
    pub stacks: Vec<CoAttentionStack>,
    pub w_f: ParamId,
    pub b_f: ParamId,
}

/// Banks available for one post; vision and attributes may be absent.
#[derive(Clone, Copy, Debug)]
pub struct Banks {
    pub text: Var,
    pub vision: Option<Var>,
    pub attribute: Option<Var>,
}

impl M3hParams {
    /// `c_fuse = (Σ present stack outputs) W_f + b_f`. When no stack can
    /// run, the max-pooled text query stands in for the sum.
    pub fn fuse<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        banks: &Banks,
        mut records: Option<&mut Vec<AttentionRecord>>,
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for stack in &self.stacks {
            let pair = match stack.direction {
                Direction::TextToVision => banks.vision.map(|v| (banks.text, v)),
                Direction::TextToAttribute => banks.attribute.map(|a| (banks.text, a)),
                Direction::VisionToText => banks.vision.map(|v| (v, banks.text)),
                Direction::AttributeToText => banks.attribute.map(|a| (a, banks.text)),
            };
            let Some((query, memory)) = pair else {
                continue;
            };
            let out = stack.forward(tape, store, query, memory, records.as_deref_mut())?;
            total = Some(match total {
                Some(t) => tape.add(t, out)?,
                None => out,
            });
        }
        let sum = match total {
            Some(t) => t,
            None => tape.pool(banks.text, PoolMode::Max)?,
        };
        let w = tape.param(store, self.w_f);
        let b = tape.param(store, self.b_f);
        let x = tape.matmul(sum, w)?;
        tape.add(x, b)
    }
}
