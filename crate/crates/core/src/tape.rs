//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive as it is evaluated. Nodes are appended
//! in evaluation order, so the node list is already topologically sorted and
//! [`Tape::backward`] only has to walk it once in reverse. A tape is built
//! fresh for each forward pass and may be differentiated exactly once.
//!
//! Tensors are viewed as `[rows × last_dim]` matrices by the row-wise
//! primitives (softmax, layer norm, concat, pooling).

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Right operand is a single row repeated over every row of the left.
    Row,
    /// Right operand has a single element.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Ln,
}

/// Row-pooling mode.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var, Broadcast),
    Scale(Var, T),
    AddConst(Var),
    Unary(UnaryKind, Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LogSoftmax(Var),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    Transpose(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AvgPool(Var),
    Sum(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ScatterAdd {
        x: Var,
        index: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_str(t: &Tensor<impl Scalar>) -> String {
    format!("{:?}", t.shape())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grad_enabled: true,
            consumed: false,
        }
    }

    /// A tape on which nothing requires a gradient (inference).
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a constant input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a parameter leaf. Repeated requests for the same parameter
    /// return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "matmul of {} and {}",
                shape_str(ta),
                shape_str(tb)
            )));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == T::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    fn broadcast_kind(&self, a: Var, b: Var) -> Result<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.numel() == 1 {
            Ok(Broadcast::Scalar)
        } else if tb.numel() == ta.last_dim() && tb.rows() == 1 {
            Ok(Broadcast::Row)
        } else {
            Err(Error::dim(format!(
                "cannot broadcast {} onto {}",
                shape_str(tb),
                shape_str(ta)
            )))
        }
    }

    fn binary(&mut self, kind: BinaryKind, mut a: Var, mut b: Var) -> Result<Var> {
        let commutative = matches!(kind, BinaryKind::Add | BinaryKind::Mul);
        if commutative && self.value(a).numel() < self.value(b).numel() {
            std::mem::swap(&mut a, &mut b);
        }
        let bc = self.broadcast_kind(a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let cols = ta.last_dim();
        let bd = tb.data();
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<T> = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = match bc {
                    Broadcast::Same => bd[i],
                    Broadcast::Row => bd[i % cols],
                    Broadcast::Scalar => bd[0],
                };
                f(x, y)
            })
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Binary(kind, a, b, bc), rg))
    }

    /// Elementwise sum; the smaller operand may be a row or a single element.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -T::one());
        let out = self.value(neg).map(|v| T::one() + v);
        let rg = self.any_grad(&[neg]);
        self.push(out, Op::AddConst(neg), rg)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = |v: T| match kind {
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Sigmoid => stable_sigmoid(v),
            UnaryKind::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            UnaryKind::Exp => v.exp(),
            UnaryKind::Ln => v.ln(),
        };
        let out = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Unary(kind, x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Ln, x)
    }

    /// Softmax along `axis`, stabilised by subtracting the maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "softmax axis {axis} out of range for {}",
                shape_str(t)
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * n + k) * inner + i;
                let mut max = T::neg_infinity();
                for k in 0..n {
                    max = max.max(src[at(k)]);
                }
                let mut total = T::zero();
                for k in 0..n {
                    let e = (src[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        let shape = shape.to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let axis = self.value(x).rank() - 1;
        self.softmax(x, axis)
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let cols = t.last_dim();
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
            out.extend(row.iter().map(|&v| v - lse));
        }
        debug_assert_eq!(out.len() % cols, 0);
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LogSoftmax(x), rg)
    }

    /// Concatenation along the last axis. All inputs need the same row count.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::dim("concat of zero tensors"));
        }
        let rows = self.value(xs[0]).rows();
        for &x in xs {
            if self.value(x).rows() != rows {
                return Err(Error::dim(format!(
                    "concat of {} and {}",
                    shape_str(self.value(xs[0])),
                    shape_str(self.value(x))
                )));
            }
        }
        let total: usize = xs.iter().map(|&x| self.value(x).last_dim()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let mut shape = self.value(xs[0]).shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Stacks equally sized vectors (or single-row matrices) into a matrix.
    pub fn stack_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::EmptyBank("stack of zero rows".into()));
        }
        let n = self.value(xs[0]).numel();
        let mut out = Vec::with_capacity(n * xs.len());
        for &x in xs {
            let t = self.value(x);
            if t.numel() != n {
                return Err(Error::dim(format!(
                    "stack of {} and {}",
                    shape_str(self.value(xs[0])),
                    shape_str(t)
                )));
            }
            out.extend_from_slice(t.data());
        }
        let rg = self.any_grad(xs);
        Ok(self.push(
            Tensor::new(vec![xs.len(), n], out)?,
            Op::StackRows(xs.to_vec()),
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim(format!("transpose of {}", shape_str(t))));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Layer normalisation over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let t = self.value(x);
        let n = t.last_dim();
        if n < 2 {
            return Err(Error::dim(format!(
                "layer norm needs at least 2 features, got {}",
                shape_str(t)
            )));
        }
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != n || tb.numel() != n {
            return Err(Error::dim(format!(
                "layer norm of {} with gain {} and bias {}",
                shape_str(t),
                shape_str(tg),
                shape_str(tb)
            )));
        }
        let nf = T::of_f64(n as f64);
        let mut xhat = Vec::with_capacity(t.numel());
        let mut inv_std = Vec::with_capacity(t.rows());
        let mut out = Vec::with_capacity(t.numel());
        for r in 0..t.rows() {
            let row = t.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * is;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Column-wise pooling of an `[L × d]` bank into a `[1 × d]` row.
    /// Max-pool ties route the gradient to the lowest row index.
    pub fn pool(&mut self, x: Var, mode: PoolMode) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim(format!("pool of {}", shape_str(t))));
        }
        let (l, d) = (t.shape()[0], t.shape()[1]);
        let data = t.data();
        let rg = self.any_grad(&[x]);
        match mode {
            PoolMode::Max => {
                let mut argmax = vec![0usize; d];
                let mut out = data[..d].to_vec();
                for r in 1..l {
                    for c in 0..d {
                        if data[r * d + c] > out[c] {
                            out[c] = data[r * d + c];
                            argmax[c] = r;
                        }
                    }
                }
                Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MaxPool { x, argmax }, rg))
            }
            PoolMode::Avg => {
                let mut out = vec![T::zero(); d];
                for r in 0..l {
                    for c in 0..d {
                        out[c] += data[r * d + c];
                    }
                }
                let lf = T::of_f64(l as f64);
                for v in &mut out {
                    *v = *v / lf;
                }
                Ok(self.push(Tensor::new(vec![1, d], out)?, Op::AvgPool(x), rg))
            }
        }
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Picks elements by flat index into a 1-D tensor.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if index.is_empty() {
            return Err(Error::dim("gather with empty index"));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= t.numel()) {
            return Err(Error::dim(format!(
                "gather index {bad} out of range for {}",
                shape_str(t)
            )));
        }
        let out: Vec<T> = index.iter().map(|&i| t.data()[i]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::vector(out)?,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Selects whole rows of a matrix (embedding lookup).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || rows.is_empty() {
            return Err(Error::dim(format!(
                "row gather of {} rows from {}",
                rows.len(),
                shape_str(t)
            )));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            if i >= r {
                return Err(Error::dim(format!(
                    "row {i} out of range for {}",
                    shape_str(t)
                )));
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::matrix(rows.len(), c, out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// `out[index[i]] += x[i]` into a fresh vector of length `size`.
    /// Accumulation follows increasing `i`.
    pub fn scatter_add(&mut self, x: Var, index: &[usize], size: usize) -> Result<Var> {
        let t = self.value(x);
        if t.numel() != index.len() {
            return Err(Error::dim(format!(
                "scatter of {} with {} indices",
                shape_str(t),
                index.len()
            )));
        }
        let mut out = vec![T::zero(); size];
        for (i, &j) in index.iter().enumerate() {
            if j >= size {
                return Err(Error::dim(format!("scatter index {j} out of range {size}")));
            }
            out[j] += t.data()[i];
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::vector(out)?,
            Op::ScatterAdd {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `loss` to every node that requires
    /// one. A tape can only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::contract("backward already ran on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut params: Vec<(ParamId, Var)> = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| *p);
        let tensors = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients {
            grads: tensors,
            params,
        })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                let (ad, bd) = (ta.data(), tb.data());
                if needs(*a) {
                    acc(*a, &mut |da| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                let mut s = T::zero();
                                for (&x, &y) in grow.iter().zip(brow) {
                                    s += x * y;
                                }
                                da[i * k + p] += s;
                            }
                        }
                    });
                }
                if needs(*b) {
                    acc(*b, &mut |db| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == T::zero() {
                                    continue;
                                }
                                let drow = &mut db[p * n..(p + 1) * n];
                                for (d, &x) in drow.iter_mut().zip(grow) {
                                    *d += av * x;
                                }
                            }
                        }
                    });
                }
            }
            Op::Binary(kind, a, b, bc) => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                let cols = nodes[a.0].value.last_dim();
                let bidx = |i: usize| match bc {
                    Broadcast::Same => i,
                    Broadcast::Row => i % cols,
                    Broadcast::Scalar => 0,
                };
                acc(*a, &mut |da| {
                    for (i, d) in da.iter_mut().enumerate() {
                        *d += match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * bd[bidx(i)],
                            BinaryKind::Div => g[i] / bd[bidx(i)],
                        };
                    }
                });
                acc(*b, &mut |db| {
                    for i in 0..g.len() {
                        let j = bidx(i);
                        db[j] += match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * ad[i],
                            BinaryKind::Div => -g[i] * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |dx| {
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi * *c;
                }
            }),
            Op::AddConst(x) | Op::Reshape(x) => acc(*x, &mut |dx| {
                for (d, &gi) in dx.iter_mut().zip(g) {
                    *d += gi;
                }
            }),
            Op::Unary(kind, x) => {
                let xd = nodes[x.0].value.data();
                acc(*x, &mut |dx| {
                    for i in 0..dx.len() {
                        let y = out[i];
                        dx[i] += g[i]
                            * match kind {
                                UnaryKind::Tanh => T::one() - y * y,
                                UnaryKind::Sigmoid => y * (T::one() - y),
                                UnaryKind::Relu => {
                                    if xd[i] > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                UnaryKind::Exp => y,
                                UnaryKind::Ln => T::one() / xd[i],
                            };
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                n,
                inner,
            } => acc(*x, &mut |dx| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..*n).map(|k| g[at(k)] * out[at(k)]).sum();
                        for k in 0..*n {
                            dx[at(k)] += out[at(k)] * (g[at(k)] - dot);
                        }
                    }
                }
            }),
            Op::LogSoftmax(x) => {
                let cols = node.value.last_dim();
                acc(*x, &mut |dx| {
                    for r in 0..g.len() / cols {
                        let gs: T = g[r * cols..(r + 1) * cols].iter().copied().sum();
                        for c in 0..cols {
                            let i = r * cols + c;
                            dx[i] += g[i] - out[i].exp() * gs;
                        }
                    }
                });
            }
            Op::Concat(xs) => {
                let total = node.value.last_dim();
                let rows = node.value.rows();
                let mut offset = 0;
                for &x in xs {
                    let w = nodes[x.0].value.last_dim();
                    acc(x, &mut |dx| {
                        for r in 0..rows {
                            for c in 0..w {
                                dx[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::StackRows(xs) => {
                let n = node.value.last_dim();
                for (r, &x) in xs.iter().enumerate() {
                    acc(x, &mut |dx| {
                        for (d, &gi) in dx.iter_mut().zip(&g[r * n..(r + 1) * n]) {
                            *d += gi;
                        }
                    });
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (nodes[x.0].value.shape()[0], nodes[x.0].value.shape()[1]);
                acc(*x, &mut |dx| {
                    for i in 0..r {
                        for j in 0..c {
                            dx[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = node.value.last_dim();
                let rows = node.value.rows();
                let gd = nodes[gain.0].value.data();
                acc(*gain, &mut |dg| {
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for r in 0..rows {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                });
                acc(*x, &mut |dx| {
                    let nf = T::of_f64(n as f64);
                    for r in 0..rows {
                        let dxhat: Vec<T> = (0..n).map(|j| g[r * n + j] * gd[j]).collect();
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = (0..n).map(|j| dxhat[j] * xhat[r * n + j]).sum();
                        for j in 0..n {
                            dx[r * n + j] +=
                                inv_std[r] / nf * (nf * dxhat[j] - s1 - xhat[r * n + j] * s2);
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                let d = argmax.len();
                acc(*x, &mut |dx| {
                    for (c, &r) in argmax.iter().enumerate() {
                        dx[r * d + c] += g[c];
                    }
                });
            }
            Op::AvgPool(x) => {
                let t = &nodes[x.0].value;
                let (l, d) = (t.shape()[0], t.shape()[1]);
                let lf = T::of_f64(l as f64);
                acc(*x, &mut |dx| {
                    for r in 0..l {
                        for c in 0..d {
                            dx[r * d + c] += g[c] / lf;
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |dx| {
                for d in dx.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Gather { x, index } => acc(*x, &mut |dx| {
                for (i, &j) in index.iter().enumerate() {
                    dx[j] += g[i];
                }
            }),
            Op::GatherRows { x, rows } => {
                let c = node.value.last_dim();
                acc(*x, &mut |dx| {
                    for (i, &r) in rows.iter().enumerate() {
                        for k in 0..c {
                            dx[r * c + k] += g[i * c + k];
                        }
                    }
                });
            }
            Op::ScatterAdd { x, index } => acc(*x, &mut |dx| {
                for (i, &j) in index.iter().enumerate() {
                    dx[i] += g[j];
                }
            }),
        }
    }
}

fn stable_sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` required one and
    /// was reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every parameter used on the tape, ordered by id.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> {
        self.params.iter().map(|&(p, v)| (p, self.grads[v.0].as_ref()))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.grads[v.0].as_ref())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(Tensor::identity(2));
        let m = tape.constant(t(&[2, 2], &[3., 4., 5., 6.]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out).data(), &[3., 4., 5., 6.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let z = tape.constant(t(&[2, 1], &[0., 0.]));
        let out = tape.matmul(a, z).unwrap();
        assert_eq!(tape.value(out).data(), &[0.]);

        let a = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = tape.constant(t(&[2, 1], &[5., 6.]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[17., 39.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.matches("[2, 3]").count() == 2, "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0., 0.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[3], &[1000., 1000., 1000.]));
        let y = tape.softmax(x, 0).unwrap();
        for &v in tape.value(y).data() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }

        let x = tape.constant(t(&[2], &[std::f64::consts::FRAC_1_SQRT_2, 0.]));
        let y = tape.softmax(x, 0).unwrap();
        let e = std::f64::consts::FRAC_1_SQRT_2.exp();
        assert_abs_diff_eq!(tape.value(y).data()[0], e / (e + 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(tape.value(y).data()[0], 0.6698, epsilon = 1e-4);
        assert_abs_diff_eq!(tape.value(y).data()[1], 0.3302, epsilon = 1e-4);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[0., 5., 0., 5.]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(tape.softmax(x, 2).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::scalar(0.0));
        let a = tape.tanh(z);
        let b = tape.sigmoid(z);
        assert_eq!(tape.value(a).item(), 0.0);
        assert_eq!(tape.value(b).item(), 0.5);
        let p = tape.constant(t(&[2], &[1., 2.]));
        let q = tape.constant(t(&[1], &[3.]));
        let c = tape.concat(&[p, q]).unwrap();
        assert_eq!(tape.value(c).data(), &[1., 2., 3.]);
    }

    #[test]
    fn incompatible_broadcast_is_a_dimension_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        assert!(matches!(tape.add(a, b), Err(Error::Dimension(_))));
        let c = tape.constant(Tensor::zeros(vec![3, 2]));
        assert!(tape.concat(&[a, c]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(t(&[2], &[1., 1.]));
        let b = tape.constant(t(&[2], &[0., 0.]));
        let x = tape.constant(t(&[2], &[1., -1.]));
        let y = tape.layer_norm(x, g, b, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[1., -1.]);

        let c = tape.constant(t(&[3], &[4., 4., 4.]));
        let g3 = tape.constant(t(&[3], &[1., 1., 1.]));
        let b3 = tape.constant(t(&[3], &[0., 0., 0.]));
        let y = tape.layer_norm(c, g3, b3, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0.]);

        let x = tape.constant(t(&[3], &[0.3, -2., 7.]));
        let g0 = tape.constant(t(&[3], &[0., 0., 0.]));
        let bias = tape.constant(t(&[3], &[0.1, 0.2, 0.3]));
        let y = tape.layer_norm(x, g0, bias, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.1, 0.2, 0.3]);

        let one = tape.constant(t(&[1], &[1.]));
        assert!(tape.layer_norm(one, one, one, 1e-5).is_err());
    }

    #[test]
    fn pool_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 2], &[1., 5., 3., 2.]));
        let mx = tape.pool(x, PoolMode::Max).unwrap();
        let av = tape.pool(x, PoolMode::Avg).unwrap();
        assert_eq!(tape.value(mx).data(), &[3., 5.]);
        assert_eq!(tape.value(av).data(), &[2., 3.5]);
        let single = tape.constant(t(&[1, 3], &[1., -2., 9.]));
        for mode in [PoolMode::Max, PoolMode::Avg] {
            let p = tape.pool(single, mode).unwrap();
            assert_eq!(tape.value(p).data(), &[1., -2., 9.]);
        }
    }

    #[test]
    fn max_pool_ties_route_to_lowest_row() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3, 1], &[2., 2., 2.]));
        let p = tape.pool(x, PoolMode::Max).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1., 0., 0.]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[0.2, -1.0, 4.0]));
        let s = tape.softmax(x, 0).unwrap();
        let l = tape.sum(s);
        let grads = tape.backward(l).unwrap();
        for &g in grads.get(x).unwrap().data() {
            assert_abs_diff_eq!(g, 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_second_call() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[1., 2.]));
        let y = tape.tanh(x);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        let s = tape.sum(y);
        assert!(tape.backward(s).is_ok());
        assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_param_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::scalar(2.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let y = tape.add(y, a).unwrap();
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.param(id).unwrap().item(), 5.0);
    }

    #[test]
    fn no_grad_tape_tracks_nothing() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.leaf(Tensor::scalar(1.0));
        assert!(!tape.requires_grad(x));
    }
}
