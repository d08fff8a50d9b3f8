//! Reverse-mode automatic differentiation over [`Tensor`] matrices.
//!
//! Two interchangeable backends implement [`Graph`]:
//!
//! * [`Tape`] records every primitive it evaluates. [`Tape::grad`] runs the
//!   reverse sweep *on the same tape*, so the returned gradients are ordinary
//!   recorded values that can be differentiated again. That is what lets the
//!   denoising regularizer (a loss on the discriminator's input-gradient) be
//!   minimized over the discriminator's parameters.
//! * [`Eager`] evaluates the same primitives immediately and keeps nothing,
//!   which is what sampling and frozen-model inference use.
//!
//! Model code is written once, generic over `G: Graph`.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// The primitive set shared by both backends. Composite functions
/// ([`silu`], [`layer_norm`], [`linear`], ...) are built from these.
pub trait Graph {
    type Value: Clone;

    fn constant(&self, t: Tensor) -> Self::Value;
    fn dims(&self, a: &Self::Value) -> (usize, usize);

    fn add(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn sub(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn mul(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn neg(&self, a: &Self::Value) -> Self::Value;
    fn scale(&self, a: &Self::Value, s: f64) -> Self::Value;
    fn add_scalar(&self, a: &Self::Value, s: f64) -> Self::Value;
    fn matmul(&self, a: &Self::Value, b: &Self::Value) -> Self::Value;
    fn transpose(&self, a: &Self::Value) -> Self::Value;
    fn sigmoid(&self, a: &Self::Value) -> Self::Value;
    fn softplus(&self, a: &Self::Value) -> Self::Value;
    fn powf(&self, a: &Self::Value, p: f64) -> Self::Value;
    fn broadcast_rows(&self, a: &Self::Value, rows: usize) -> Self::Value;
    fn sum_rows(&self, a: &Self::Value) -> Self::Value;
    fn broadcast_cols(&self, a: &Self::Value, cols: usize) -> Self::Value;
    fn sum_cols(&self, a: &Self::Value) -> Self::Value;
    fn gather_rows(&self, a: &Self::Value, index: Rc<[usize]>) -> Self::Value;
    fn scatter_add_rows(&self, a: &Self::Value, index: Rc<[usize]>, rows: usize) -> Self::Value;
    fn sum_all(&self, a: &Self::Value) -> Self::Value;
    fn broadcast_all(&self, a: &Self::Value, rows: usize, cols: usize) -> Self::Value;

    /// One adaptive hidden block, `SiLU(LN(x·w + b)·(1 + scale) + shift)`.
    /// `scale` and `shift` hold one row per distinct timestep; `index` picks
    /// each input row's. An override must match this composition bit for bit.
    #[allow(clippy::too_many_arguments)]
    fn adaptive_block(
        &self,
        x: &Self::Value,
        w: &Self::Value,
        b: &Self::Value,
        scale: &Self::Value,
        shift: &Self::Value,
        index: Rc<[usize]>,
        eps: f64,
    ) -> Self::Value
    where
        Self: Sized,
    {
        let z = layer_norm(self, &linear(self, x, w, b), eps);
        let scale = self.gather_rows(scale, index.clone());
        let shift = self.gather_rows(shift, index);
        silu(self, &self.add(&self.add(&z, &self.mul(&z, &scale)), &shift))
    }
}

pub fn silu<G: Graph>(g: &G, x: &G::Value) -> G::Value {
    let s = g.sigmoid(x);
    g.mul(x, &s)
}

/// Per-row normalization to zero mean and unit variance (no affine part).
pub fn layer_norm<G: Graph>(g: &G, x: &G::Value, eps: f64) -> G::Value {
    let (_, n) = g.dims(x);
    let inv_n = 1.0 / n as f64;
    let mean = g.scale(&g.sum_cols(x), inv_n);
    let centered = g.sub(x, &g.broadcast_cols(&mean, n));
    let var = g.scale(&g.sum_cols(&g.mul(&centered, &centered)), inv_n);
    let inv_std = g.powf(&g.add_scalar(&var, eps), -0.5);
    g.mul(&centered, &g.broadcast_cols(&inv_std, n))
}

/// `x · w + b` with `b` a `[1, out]` row.
pub fn linear<G: Graph>(g: &G, x: &G::Value, w: &G::Value, b: &G::Value) -> G::Value {
    let (rows, _) = g.dims(x);
    let xw = g.matmul(x, w);
    g.add(&xw, &g.broadcast_rows(b, rows))
}

pub fn mean_all<G: Graph>(g: &G, x: &G::Value) -> G::Value {
    let (r, c) = g.dims(x);
    g.scale(&g.sum_all(x), 1.0 / (r * c) as f64)
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Immediate evaluation; nothing is recorded.
#[derive(Clone, Copy, Debug, Default)]
pub struct Eager;

impl Graph for Eager {
    type Value = Tensor;

    fn constant(&self, t: Tensor) -> Tensor {
        t
    }
    fn dims(&self, a: &Tensor) -> (usize, usize) {
        (a.rows(), a.cols())
    }
    fn add(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.add(b)
    }
    fn sub(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.sub(b)
    }
    fn mul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.mul(b)
    }
    fn neg(&self, a: &Tensor) -> Tensor {
        a.map(|v| -v)
    }
    fn scale(&self, a: &Tensor, s: f64) -> Tensor {
        a.scale(s)
    }
    fn add_scalar(&self, a: &Tensor, s: f64) -> Tensor {
        a.map(|v| v + s)
    }
    fn matmul(&self, a: &Tensor, b: &Tensor) -> Tensor {
        a.matmul(b)
    }
    fn transpose(&self, a: &Tensor) -> Tensor {
        a.transpose()
    }
    fn sigmoid(&self, a: &Tensor) -> Tensor {
        a.map(sigmoid_scalar)
    }
    fn softplus(&self, a: &Tensor) -> Tensor {
        a.map(softplus_scalar)
    }
    fn powf(&self, a: &Tensor, p: f64) -> Tensor {
        a.map(|v| v.powf(p))
    }
    fn broadcast_rows(&self, a: &Tensor, rows: usize) -> Tensor {
        a.broadcast_rows(rows)
    }
    fn sum_rows(&self, a: &Tensor) -> Tensor {
        a.sum_rows()
    }
    fn broadcast_cols(&self, a: &Tensor, cols: usize) -> Tensor {
        a.broadcast_cols(cols)
    }
    fn sum_cols(&self, a: &Tensor) -> Tensor {
        a.sum_cols()
    }
    fn gather_rows(&self, a: &Tensor, index: Rc<[usize]>) -> Tensor {
        a.gather_rows(&index)
    }
    fn scatter_add_rows(&self, a: &Tensor, index: Rc<[usize]>, rows: usize) -> Tensor {
        a.scatter_add_rows(&index, rows)
    }
    fn sum_all(&self, a: &Tensor) -> Tensor {
        a.sum_all()
    }
    fn broadcast_all(&self, a: &Tensor, rows: usize, cols: usize) -> Tensor {
        a.broadcast_all(rows, cols)
    }

    // Same arithmetic as the default, in place on one buffer.
    fn adaptive_block(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        index: Rc<[usize]>,
        eps: f64,
    ) -> Tensor {
        let mut out = x.matmul(w);
        let n = out.cols();
        let inv_n = 1.0 / n as f64;
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            for (v, bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
            let mean = row.iter().sum::<f64>() * inv_n;
            for v in row.iter_mut() {
                *v -= mean;
            }
            let var = row.iter().map(|v| v * v).sum::<f64>() * inv_n;
            let inv_std = (var + eps).powf(-0.5);
            let k = index[r];
            for ((v, s), h) in row.iter_mut().zip(scale.row(k)).zip(shift.row(k)) {
                let z = *v * inv_std;
                let m = (z + z * s) + h;
                *v = m * sigmoid_scalar(m);
            }
        }
        out
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Softplus(usize),
    Powf(usize, f64),
    BroadcastRows(usize, usize),
    SumRows(usize),
    BroadcastCols(usize, usize),
    SumCols(usize),
    GatherRows(usize, Rc<[usize]>),
    ScatterAddRows(usize, Rc<[usize]>, usize),
    SumAll(usize),
    BroadcastAll(usize, usize, usize),
}

impl Op {
    fn inputs(&self) -> [Option<usize>; 2] {
        use Op::*;
        match *self {
            Leaf => [None, None],
            Add(a, b) | Sub(a, b) | Mul(a, b) | MatMul(a, b) => [Some(a), Some(b)],
            Neg(a)
            | Scale(a, _)
            | AddScalar(a, _)
            | Transpose(a)
            | Sigmoid(a)
            | Softplus(a)
            | Powf(a, _)
            | BroadcastRows(a, _)
            | SumRows(a)
            | BroadcastCols(a, _)
            | SumCols(a)
            | GatherRows(a, _)
            | ScatterAddRows(a, _, _)
            | SumAll(a)
            | BroadcastAll(a, _, _) => [Some(a), None],
        }
    }

    /// Evaluates a non-leaf op. Used both when recording and when replaying,
    /// so both paths run identical arithmetic.
    fn eval<'a>(&self, value: impl Fn(usize) -> &'a Tensor) -> Tensor {
        let e = Eager;
        use Op::*;
        match self {
            Leaf => unreachable!("leaves carry their own value"),
            Add(a, b) => e.add(value(*a), value(*b)),
            Sub(a, b) => e.sub(value(*a), value(*b)),
            Mul(a, b) => e.mul(value(*a), value(*b)),
            Neg(a) => e.neg(value(*a)),
            Scale(a, s) => e.scale(value(*a), *s),
            AddScalar(a, s) => e.add_scalar(value(*a), *s),
            MatMul(a, b) => e.matmul(value(*a), value(*b)),
            Transpose(a) => e.transpose(value(*a)),
            Sigmoid(a) => e.sigmoid(value(*a)),
            Softplus(a) => e.softplus(value(*a)),
            Powf(a, p) => e.powf(value(*a), *p),
            BroadcastRows(a, n) => e.broadcast_rows(value(*a), *n),
            SumRows(a) => e.sum_rows(value(*a)),
            BroadcastCols(a, n) => e.broadcast_cols(value(*a), *n),
            SumCols(a) => e.sum_cols(value(*a)),
            GatherRows(a, idx) => e.gather_rows(value(*a), idx.clone()),
            ScatterAddRows(a, idx, n) => e.scatter_add_rows(value(*a), idx.clone(), *n),
            SumAll(a) => e.sum_all(value(*a)),
            BroadcastAll(a, r, c) => e.broadcast_all(value(*a), *r, *c),
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Append-only record of evaluated primitives.
///
/// Node ids are assigned in evaluation order, so every node's inputs have
/// smaller ids and iterating ids downwards is a reverse topological order.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaf(&self, t: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            value: t,
        });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn with_value<R>(&self, v: Var, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.nodes.borrow()[v.0].value)
    }

    fn record(&self, op: Op) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            op.eval(|i| &nodes[i].value)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var(nodes.len() - 1)
    }

    /// Re-evaluates every recorded op from the leaves.
    pub fn replay(&self) -> Vec<Tensor> {
        let nodes = self.nodes.borrow();
        let mut out: Vec<Tensor> = Vec::with_capacity(nodes.len());
        for node in nodes.iter() {
            let v = match node.op {
                Op::Leaf => node.value.clone(),
                ref op => op.eval(|i| &out[i]),
            };
            out.push(v);
        }
        out
    }

    /// True when [`replay`](Self::replay) reproduces every recorded value
    /// bit for bit.
    pub fn replay_matches(&self) -> bool {
        let replayed = self.replay();
        let nodes = self.nodes.borrow();
        nodes.iter().zip(&replayed).all(|(n, r)| {
            n.value.shape() == r.shape()
                && n
                    .value
                    .data()
                    .iter()
                    .zip(r.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits())
        })
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// The sweep is recorded on this tape, so the results can themselves be
    /// differentiated. Variables `output` does not depend on get zeros.
    pub fn grad(&self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        self.grad_traced(output, wrt).map(|(g, _)| g)
    }

    /// [`grad`](Self::grad), also returning the ids of the nodes whose
    /// adjoints were propagated, in visiting order.
    pub fn grad_traced(&self, output: Var, wrt: &[Var]) -> Result<(Vec<Var>, Vec<usize>)> {
        let (rows, cols) = self.dims(&output);
        if (rows, cols) != (1, 1) {
            return Err(Error::Contract(format!(
                "gradient requested of a non-scalar [{rows}, {cols}] value"
            )));
        }
        let end = output.0 + 1;

        let mut needs = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needs[w.0] = true;
            }
        }
        let ops: Vec<Op> = {
            let nodes = self.nodes.borrow();
            nodes[..end].iter().map(|n| n.op.clone()).collect()
        };
        for (i, op) in ops.iter().enumerate() {
            if !needs[i] {
                needs[i] = op.inputs().iter().flatten().any(|&j| needs[j]);
            }
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        adj[output.0] = Some(self.leaf(Tensor::scalar(1.0)));
        let mut visited = Vec::new();

        for i in (0..end).rev() {
            let (Some(g), true) = (adj[i], needs[i]) else {
                continue;
            };
            let op = &ops[i];
            if matches!(op, Op::Leaf) {
                continue;
            }
            visited.push(i);
            let contribs = self.adjoint(op, Var(i), g, &needs);
            for (j, c) in contribs.into_iter().flatten() {
                adj[j] = Some(match adj[j] {
                    Some(prev) => self.add(&prev, &c),
                    None => c,
                });
            }
        }

        let grads = wrt
            .iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.dims(w);
                    self.leaf(Tensor::zeros(r, c))
                }
            })
            .collect();
        Ok((grads, visited))
    }

    /// Input adjoints of one node given the adjoint `g` of its output.
    fn adjoint(&self, op: &Op, out: Var, g: Var, needs: &[bool]) -> [Option<(usize, Var)>; 2] {
        use Op::*;
        let want = |j: usize| needs[j];
        let one = |j: usize, f: &dyn Fn() -> Var| want(j).then(|| (j, f()));
        match op {
            Leaf => [None, None],
            Add(a, b) => [one(*a, &|| g), one(*b, &|| g)],
            Sub(a, b) => [one(*a, &|| g), one(*b, &|| self.neg(&g))],
            Mul(a, b) => [
                one(*a, &|| self.mul(&g, &Var(*b))),
                one(*b, &|| self.mul(&g, &Var(*a))),
            ],
            Neg(a) => [one(*a, &|| self.neg(&g)), None],
            Scale(a, s) => [one(*a, &|| self.scale(&g, *s)), None],
            AddScalar(a, _) => [one(*a, &|| g), None],
            MatMul(a, b) => [
                one(*a, &|| self.matmul(&g, &self.transpose(&Var(*b)))),
                one(*b, &|| self.matmul(&self.transpose(&Var(*a)), &g)),
            ],
            Transpose(a) => [one(*a, &|| self.transpose(&g)), None],
            Sigmoid(a) => [
                one(*a, &|| {
                    // s' = s (1 - s), expressed on the tape so it can be
                    // differentiated again.
                    let one_minus = self.add_scalar(&self.neg(&out), 1.0);
                    self.mul(&g, &self.mul(&out, &one_minus))
                }),
                None,
            ],
            Softplus(a) => [one(*a, &|| self.mul(&g, &self.sigmoid(&Var(*a)))), None],
            Powf(a, p) => [
                one(*a, &|| {
                    let d = self.scale(&self.powf(&Var(*a), p - 1.0), *p);
                    self.mul(&g, &d)
                }),
                None,
            ],
            BroadcastRows(a, _) => [one(*a, &|| self.sum_rows(&g)), None],
            SumRows(a) => {
                let (rows, _) = self.dims(&Var(*a));
                [one(*a, &|| self.broadcast_rows(&g, rows)), None]
            }
            BroadcastCols(a, _) => [one(*a, &|| self.sum_cols(&g)), None],
            SumCols(a) => {
                let (_, cols) = self.dims(&Var(*a));
                [one(*a, &|| self.broadcast_cols(&g, cols)), None]
            }
            GatherRows(a, idx) => {
                let (rows, _) = self.dims(&Var(*a));
                [
                    one(*a, &|| self.scatter_add_rows(&g, idx.clone(), rows)),
                    None,
                ]
            }
            ScatterAddRows(a, idx, _) => [one(*a, &|| self.gather_rows(&g, idx.clone())), None],
            SumAll(a) => {
                let (r, c) = self.dims(&Var(*a));
                [one(*a, &|| self.broadcast_all(&g, r, c)), None]
            }
            BroadcastAll(a, _, _) => [one(*a, &|| self.sum_all(&g)), None],
        }
    }
}

impl Graph for Tape {
    type Value = Var;

    fn constant(&self, t: Tensor) -> Var {
        self.leaf(t)
    }
    fn dims(&self, a: &Var) -> (usize, usize) {
        self.with_value(*a, |t| (t.rows(), t.cols()))
    }
    fn add(&self, a: &Var, b: &Var) -> Var {
        self.record(Op::Add(a.0, b.0))
    }
    fn sub(&self, a: &Var, b: &Var) -> Var {
        self.record(Op::Sub(a.0, b.0))
    }
    fn mul(&self, a: &Var, b: &Var) -> Var {
        self.record(Op::Mul(a.0, b.0))
    }
    fn neg(&self, a: &Var) -> Var {
        self.record(Op::Neg(a.0))
    }
    fn scale(&self, a: &Var, s: f64) -> Var {
        self.record(Op::Scale(a.0, s))
    }
    fn add_scalar(&self, a: &Var, s: f64) -> Var {
        self.record(Op::AddScalar(a.0, s))
    }
    fn matmul(&self, a: &Var, b: &Var) -> Var {
        self.record(Op::MatMul(a.0, b.0))
    }
    fn transpose(&self, a: &Var) -> Var {
        self.record(Op::Transpose(a.0))
    }
    fn sigmoid(&self, a: &Var) -> Var {
        self.record(Op::Sigmoid(a.0))
    }
    fn softplus(&self, a: &Var) -> Var {
        self.record(Op::Softplus(a.0))
    }
    fn powf(&self, a: &Var, p: f64) -> Var {
        self.record(Op::Powf(a.0, p))
    }
    fn broadcast_rows(&self, a: &Var, rows: usize) -> Var {
        self.record(Op::BroadcastRows(a.0, rows))
    }
    fn sum_rows(&self, a: &Var) -> Var {
        self.record(Op::SumRows(a.0))
    }
    fn broadcast_cols(&self, a: &Var, cols: usize) -> Var {
        self.record(Op::BroadcastCols(a.0, cols))
    }
    fn sum_cols(&self, a: &Var) -> Var {
        self.record(Op::SumCols(a.0))
    }
    fn gather_rows(&self, a: &Var, index: Rc<[usize]>) -> Var {
        self.record(Op::GatherRows(a.0, index))
    }
    fn scatter_add_rows(&self, a: &Var, index: Rc<[usize]>, rows: usize) -> Var {
        self.record(Op::ScatterAddRows(a.0, index, rows))
    }
    fn sum_all(&self, a: &Var) -> Var {
        self.record(Op::SumAll(a.0))
    }
    fn broadcast_all(&self, a: &Var, rows: usize, cols: usize) -> Var {
        self.record(Op::BroadcastAll(a.0, rows, cols))
    }
}
