//! Text, visual and attribute encoders producing memory banks.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Gate parameters of one GRU cell, row-vector convention:
/// `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)`,
/// `n = tanh(x W_n + (r ⊙ h) U_n + b_n)`, `h' = (1 − z) ⊙ n + z ⊙ h`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
    pub hidden: usize,
}

const GATES: [&str; 3] = ["z", "r", "n"];

impl GruParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut ids = |kind: &str, shape: Vec<usize>, init: Init| -> Result<[ParamId; 3]> {
            let mut out = [ParamId(0); 3];
            for (g, slot) in GATES.iter().zip(out.iter_mut()) {
                *slot = store.init(format!("{prefix}.{kind}_{g}"), shape.clone(), init, rng)?;
            }
            Ok(out)
        };
        let w = ids("w", vec![input, hidden], Init::FanIn)?;
        let u = ids("u", vec![hidden, hidden], Init::FanIn)?;
        let b = ids("b", vec![1, hidden], Init::Zeros)?;
        Ok(Self { w, u, b, hidden })
    }

    /// Input-side projections `X W_g + b_g` for a whole sequence.
    pub fn project_inputs<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<[Var; 3]> {
        let mut out = [x; 3];
        for g in 0..3 {
            let w = tape.param(store, self.w[g]);
            let b = tape.param(store, self.b[g]);
            let xw = tape.matmul(x, w)?;
            out[g] = tape.add(xw, b)?;
        }
        Ok(out)
    }

    /// One recurrence step given pre-projected inputs (each `[1 × hidden]`).
    pub fn step<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        xp: [Var; 3],
        h: Var,
    ) -> Result<Var> {
        let uz = tape.param(store, self.u[0]);
        let ur = tape.param(store, self.u[1]);
        let un = tape.param(store, self.u[2]);
        let hz = tape.matmul(h, uz)?;
        let z = tape.add(xp[0], hz)?;
        let z = tape.sigmoid(z);
        let hr = tape.matmul(h, ur)?;
        let r = tape.add(xp[1], hr)?;
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h)?;
        let rhu = tape.matmul(rh, un)?;
        let n = tape.add(xp[2], rhu)?;
        let n = tape.tanh(n);
        let keep = tape.one_minus(z);
        let a = tape.mul(keep, n)?;
        let b = tape.mul(z, h)?;
        tape.add(a, b)
    }

    /// Runs the cell over the rows of `x` (`[L × input]`), in reverse when
    /// `reverse` is set. Returns the states in position order.
    pub fn run<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        reverse: bool,
    ) -> Result<Vec<Var>> {
        let len = tape.value(x).shape()[0];
        let proj = self.project_inputs(tape, store, x)?;
        let mut h = tape.constant(Tensor::zeros(vec![1, self.hidden]));
        let mut states = vec![h; len];
        let order: Vec<usize> = if reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let mut xp = proj;
            for g in 0..3 {
                xp[g] = tape.gather_rows(proj[g], &[t])?;
            }
            h = self.step(tape, store, xp, h)?;
            states[t] = h;
        }
        Ok(states)
    }
}

/// Stacked bidirectional GRU layers.
#[derive(Clone, Debug)]
pub struct BiGruParams {
    pub layers: Vec<(GruParams, GruParams)>,
}

impl BiGruParams {
    pub fn register<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        d_emb: usize,
        d_model: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let half = d_model / 2;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let input = if l == 0 { d_emb } else { d_model };
            let fwd = GruParams::register(store, &format!("enc.l{l}.fwd"), input, half, rng)?;
            let bwd = GruParams::register(store, &format!("enc.l{l}.bwd"), input, half, rng)?;
            layers.push((fwd, bwd));
        }
        Ok(Self { layers })
    }
}

/// Text memory bank `[l × d]` and the encoder's last state `[1 × d]`.
#[derive(Clone, Copy, Debug)]
pub struct TextEncoding {
    pub bank: Var,
    pub last: Var,
}

/// Embeds `ids` and runs the stacked Bi-GRU. Row `i` of the bank is the
/// concatenation of the forward and backward top-layer states at `i`.
pub fn encode_text<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    embedding: ParamId,
    rnn: &BiGruParams,
    ids: &[usize],
) -> Result<TextEncoding> {
    if ids.is_empty() {
        return Err(Error::contract("cannot encode an empty token sequence"));
    }
    let table = tape.param(store, embedding);
    let mut x = tape.gather_rows(table, ids)?;
    for (fwd, bwd) in &rnn.layers {
        let f = fwd.run(tape, store, x, false)?;
        let b = bwd.run(tape, store, x, true)?;
        let rows = f
            .iter()
            .zip(&b)
            .map(|(&fi, &bi)| tape.concat(&[fi, bi]))
            .collect::<Result<Vec<_>>>()?;
        x = tape.stack_rows(&rows)?;
    }
    let last = tape.gather_rows(x, &[ids.len() - 1])?;
    Ok(TextEncoding { bank: x, last })
}

/// Row-wise affine map `X W + b`.
pub fn affine<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    x: Var,
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let wv = tape.param(store, w);
    let bv = tape.param(store, b);
    let xw = tape.matmul(x, wv)?;
    tape.add(xw, bv)
}

/// Projects `[l_v × d_v]` region features into the model dimension.
pub fn project_visual<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    features: &Tensor<T>,
    w: ParamId,
    b: ParamId,
) -> Result<Var> {
    let expected = store.get(w).shape()[0];
    if features.rank() != 2 || features.shape()[1] != expected {
        return Err(Error::dim(format!(
            "visual features {:?} do not match feature dimension {expected}",
            features.shape()
        )));
    }
    let x = tape.constant(features.clone());
    affine(tape, store, x, w, b)
}

/// Embeds attribute tokens with the shared table and projects them.
/// Returns `None` when the post has no attributes.
pub fn project_attributes<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    embedding: ParamId,
    ids: &[usize],
    w: ParamId,
    b: ParamId,
) -> Result<Option<Var>> {
    if ids.is_empty() {
        return Ok(None);
    }
    let table = tape.param(store, embedding);
    let e = tape.gather_rows(table, ids)?;
    affine(tape, store, e, w, b).map(Some)
}
