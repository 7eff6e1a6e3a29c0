use std::cell::{Cell, Ref, RefCell};
use std::fmt;

use rand::RngExt;

use super::{numel, Scalar, Tensor};
use crate::error::{Error, Result};

/// Additive bias applied to masked attention keys before the softmax.
pub const MASKED_SCORE: f64 = -1e9;

/// Kind of a recorded operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Transpose,
    Reshape,
    Add,
    AddRow,
    Scale,
    Relu,
    SoftmaxRows,
    LayerNorm,
    Conv1d,
    MaskKeys,
    RowMask,
    MaskedMeanRows,
    Concat,
    Dropout,
    Sum,
    Mse,
}

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Scale(usize, T),
    Relu(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        kernel: usize,
    },
    MaskKeys(usize),
    RowMask(usize, Vec<T>),
    MaskedMeanRows {
        x: usize,
        mask: Vec<T>,
        count: usize,
    },
    Concat(Vec<usize>),
    Dropout(usize, Vec<T>),
    Sum(usize),
    Mse(usize, usize),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Add(..) => OpKind::Add,
            Op::AddRow(..) => OpKind::AddRow,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(_) => OpKind::Relu,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::MaskKeys(_) => OpKind::MaskKeys,
            Op::RowMask(..) => OpKind::RowMask,
            Op::MaskedMeanRows { .. } => OpKind::MaskedMeanRows,
            Op::Concat(_) => OpKind::Concat,
            Op::Dropout(..) => OpKind::Dropout,
            Op::Sum(_) => OpKind::Sum,
            Op::Mse(..) => OpKind::Mse,
        }
    }
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only record of one forward pass.
///
/// Nodes are only ever appended, so every node's inputs precede it and a
/// single reverse sweep over the node list is a valid topological order.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    corrupt: Cell<Option<OpKind>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            corrupt: Cell::new(None),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Current position, for use with [`Tape::rewind`].
    pub fn mark(&self) -> usize {
        self.len()
    }

    /// Drops every node recorded after `mark`. Vars created after the mark
    /// are invalidated.
    pub fn rewind(&self, mark: usize) {
        self.nodes.borrow_mut().truncate(mark);
    }

    /// Test hook: scales the upstream gradient of every `kind` node by 1.5
    /// during backward, simulating a broken backward rule.
    #[doc(hidden)]
    pub fn debug_corrupt_backward(&self, kind: Option<OpKind>) {
        self.corrupt.set(kind);
    }

    fn push(&self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var<'_, T> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn node(&self, id: usize) -> Ref<'_, Node<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn rg(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Records a tensor as a leaf, keeping its `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a tensor as a differentiable leaf.
    pub fn param(&self, t: &Tensor<T>) -> Var<'_, T> {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&self, shape: Vec<usize>, data: Vec<T>) -> Result<Var<'_, T>> {
        if numel(&shape) != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension {
                op: "constant",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss was recorded on a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if loss.id >= nodes.len() {
            return Err(Error::Contract("loss refers to a rewound node".into()));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![T::one()]);
        let corrupt = self.corrupt.get();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(mut g) = grads[id].take() else {
                continue;
            };
            if corrupt == Some(node.op.kind()) {
                let k = T::of(1.5);
                g.iter_mut().for_each(|v| *v = *v * k);
            }
            backward_node(&nodes, node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

fn slot<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backward_node<T: Scalar>(
    nodes: &[Node<T>],
    node: &Node<T>,
    g: &[T],
    grads: &mut [Option<Vec<T>>],
) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
            let n = nodes[*b].shape[1];
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            if let Some(da) = slot(grads, nodes, *a) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let brow = &bv[p * n..(p + 1) * n];
                        let mut s = T::zero();
                        for j in 0..n {
                            s = s + grow[j] * brow[j];
                        }
                        da[i * k + p] = da[i * k + p] + s;
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let aip = av[i * k + p];
                        let drow = &mut db[p * n..(p + 1) * n];
                        for j in 0..n {
                            drow[j] = drow[j] + aip * grow[j];
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (r, c) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            if let Some(dx) = slot(grads, nodes, *x) {
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dx[i * c + j] + g[j * r + i];
                    }
                }
            }
        }
        Op::Reshape(x) | Op::MaskKeys(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                add_into(dx, g);
            }
        }
        Op::Add(a, b) => {
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, g);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                add_into(db, g);
            }
        }
        Op::AddRow(x, b) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                add_into(dx, g);
            }
            let d = nodes[*b].value.len();
            if let Some(db) = slot(grads, nodes, *b) {
                for row in g.chunks_exact(d) {
                    add_into(db, row);
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                for (d, &v) in dx.iter_mut().zip(g) {
                    *d = *d + v * *c;
                }
            }
        }
        Op::Relu(x) => {
            let xv = &nodes[*x].value;
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((d, &v), &xi) in dx.iter_mut().zip(g).zip(xv) {
                    if xi > T::zero() {
                        *d = *d + v;
                    }
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let n = *nodes[*x].shape.last().unwrap();
            let y = &node.value;
            if let Some(dx) = slot(grads, nodes, *x) {
                for ((drow, yrow), grow) in dx
                    .chunks_exact_mut(n)
                    .zip(y.chunks_exact(n))
                    .zip(g.chunks_exact(n))
                {
                    let dot: T = yrow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                    for j in 0..n {
                        drow[j] = drow[j] + yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let d = nodes[*gamma].value.len();
            let gv = &nodes[*gamma].value;
            if let Some(dg) = slot(grads, nodes, *gamma) {
                for (xr, gr) in xhat.chunks_exact(d).zip(g.chunks_exact(d)) {
                    for j in 0..d {
                        dg[j] = dg[j] + gr[j] * xr[j];
                    }
                }
            }
            if let Some(db) = slot(grads, nodes, *beta) {
                for gr in g.chunks_exact(d) {
                    add_into(db, gr);
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                let dn = T::of(d as f64);
                for (r, ((dxr, xr), gr)) in dx
                    .chunks_exact_mut(d)
                    .zip(xhat.chunks_exact(d))
                    .zip(g.chunks_exact(d))
                    .enumerate()
                {
                    let mut sum_dxh = T::zero();
                    let mut sum_dxh_xh = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        sum_dxh = sum_dxh + dxh;
                        sum_dxh_xh = sum_dxh_xh + dxh * xr[j];
                    }
                    let scale = inv_std[r] / dn;
                    for j in 0..d {
                        let dxh = gr[j] * gv[j];
                        dxr[j] = dxr[j] + scale * (dn * dxh - sum_dxh - xr[j] * sum_dxh_xh);
                    }
                }
            }
        }
        Op::Conv1d { x, w, b, kernel } => {
            let (len, c_in) = (nodes[*x].shape[0], nodes[*x].shape[1]);
            let c_out = nodes[*b].value.len();
            let pad = kernel / 2;
            let xv = &nodes[*x].value;
            let wv = &nodes[*w].value;
            if let Some(db) = slot(grads, nodes, *b) {
                for gr in g.chunks_exact(c_out) {
                    add_into(db, gr);
                }
            }
            if let Some(dw) = slot(grads, nodes, *w) {
                for l in 0..len {
                    let gr = &g[l * c_out..(l + 1) * c_out];
                    for k in 0..*kernel {
                        let Some(src) = (l + k).checked_sub(pad).filter(|&s| s < len) else {
                            continue;
                        };
                        for ci in 0..c_in {
                            let xval = xv[src * c_in + ci];
                            let base = (k * c_in + ci) * c_out;
                            let wrow = &mut dw[base..base + c_out];
                            for co in 0..c_out {
                                wrow[co] = wrow[co] + xval * gr[co];
                            }
                        }
                    }
                }
            }
            if let Some(dx) = slot(grads, nodes, *x) {
                for l in 0..len {
                    let gr = &g[l * c_out..(l + 1) * c_out];
                    for k in 0..*kernel {
                        let Some(src) = (l + k).checked_sub(pad).filter(|&s| s < len) else {
                            continue;
                        };
                        for ci in 0..c_in {
                            let base = (k * c_in + ci) * c_out;
                            let wrow = &wv[base..base + c_out];
                            let mut s = T::zero();
                            for co in 0..c_out {
                                s = s + wrow[co] * gr[co];
                            }
                            dx[src * c_in + ci] = dx[src * c_in + ci] + s;
                        }
                    }
                }
            }
        }
        Op::RowMask(x, mask) | Op::Dropout(x, mask) => {
            let per = nodes[*x].value.len() / mask.len();
            if let Some(dx) = slot(grads, nodes, *x) {
                for (i, (d, &v)) in dx.iter_mut().zip(g).enumerate() {
                    *d = *d + v * mask[i / per];
                }
            }
        }
        Op::MaskedMeanRows { x, mask, count } => {
            let d = g.len();
            let inv = T::one() / T::of(*count as f64);
            if let Some(dx) = slot(grads, nodes, *x) {
                for (dr, &m) in dx.chunks_exact_mut(d).zip(mask) {
                    if m != T::zero() {
                        for j in 0..d {
                            dr[j] = dr[j] + g[j] * inv;
                        }
                    }
                }
            }
        }
        Op::Concat(parts) => {
            let rows = numel(&node.shape[..node.shape.len() - 1]);
            let total = *node.shape.last().unwrap();
            let mut offset = 0;
            for &p in parts {
                let w = *nodes[p].shape.last().unwrap();
                if let Some(dp) = slot(grads, nodes, p) {
                    for r in 0..rows {
                        let src = &g[r * total + offset..r * total + offset + w];
                        add_into(&mut dp[r * w..(r + 1) * w], src);
                    }
                }
                offset += w;
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(grads, nodes, *x) {
                dx.iter_mut().for_each(|d| *d = *d + g[0]);
            }
        }
        Op::Mse(a, b) => {
            let av = &nodes[*a].value;
            let bv = &nodes[*b].value;
            let k = T::of(2.0) * g[0] / T::of(av.len() as f64);
            let diff: Vec<T> = av.iter().zip(bv).map(|(&p, &t)| k * (p - t)).collect();
            if let Some(da) = slot(grads, nodes, *a) {
                add_into(da, &diff);
            }
            if let Some(db) = slot(grads, nodes, *b) {
                for (d, &v) in db.iter_mut().zip(&diff) {
                    *d = *d - v;
                }
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `v`, or `None` if nothing flowed into it.
    pub fn get(&self, v: Var<'_, T>) -> Option<&[T]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient for `v`; zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_, T>) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); v.len()],
        }
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var<'_, T>, t: &mut Tensor<T>) -> Result<()> {
        t.accumulate_grad(&self.wrt(v))
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.node(self.id).value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<T> {
        self.tape.node(self.id).value.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.node(self.id).requires_grad
    }

    /// Copies the value out as an owned tensor.
    pub fn to_tensor(&self) -> Tensor<T> {
        let n = self.tape.node(self.id);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> T {
        let n = self.tape.node(self.id);
        debug_assert_eq!(n.value.len(), 1);
        n.value[0]
    }

    pub fn backward(self) -> Result<Gradients<T>> {
        self.tape.backward(self)
    }

    fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Contract("operands recorded on different tapes".into()))
        }
    }

    /// `self[m×k] · rhs[k×n]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs)?;
        let tape = self.tape;
        let (value, shape) = {
            let a = tape.node(self.id);
            let b = tape.node(rhs.id);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(Tape::<T>::dim_err("matmul", &a.shape, &b.shape));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![T::zero(); m * n];
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a.value[i * k + p];
                    let brow = &b.value[p * n..(p + 1) * n];
                    for j in 0..n {
                        orow[j] = orow[j] + aip * brow[j];
                    }
                }
            }
            (out, vec![m, n])
        };
        let rg = tape.rg(&[self.id, rhs.id]);
        Ok(tape.push(shape, value, rg, Op::MatMul(self.id, rhs.id)))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let tape = self.tape;
        let (value, shape) = {
            let x = tape.node(self.id);
            if x.shape.len() != 2 {
                return Err(Tape::<T>::dim_err("transpose", &x.shape, &[]));
            }
            let (r, c) = (x.shape[0], x.shape[1]);
            let mut out = vec![T::zero(); r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = x.value[i * c + j];
                }
            }
            (out, vec![c, r])
        };
        let rg = tape.rg(&[self.id]);
        Ok(tape.push(shape, value, rg, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let tape = self.tape;
        let value = {
            let x = tape.node(self.id);
            if numel(shape) != x.value.len() || shape.iter().any(|&d| d == 0) {
                return Err(Tape::<T>::dim_err("reshape", &x.shape, shape));
            }
            x.value.clone()
        };
        let rg = tape.rg(&[self.id]);
        Ok(tape.push(shape.to_vec(), value, rg, Op::Reshape(self.id)))
    }

    pub fn add(self, rhs: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&rhs)?;
        let tape = self.tape;
        let (value, shape) = {
            let a = tape.node(self.id);
            let b = tape.node(rhs.id);
            if a.shape != b.shape {
                return Err(Tape::<T>::dim_err("add", &a.shape, &b.shape));
            }
            let v = a.value.iter().zip(&b.value).map(|(&x, &y)| x + y).collect();
            (v, a.shape.clone())
        };
        let rg = tape.rg(&[self.id, rhs.id]);
        Ok(tape.push(shape, value, rg, Op::Add(self.id, rhs.id)))
    }

    /// Adds the 1-D `bias` to every row along the last axis.
    pub fn add_row(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&bias)?;
        let tape = self.tape;
        let (value, shape) = {
            let x = tape.node(self.id);
            let b = tape.node(bias.id);
            if b.shape.len() != 1 || x.shape.last() != Some(&b.shape[0]) {
                return Err(Tape::<T>::dim_err("add_row", &x.shape, &b.shape));
            }
            let d = b.shape[0];
            let mut v = x.value.clone();
            for row in v.chunks_exact_mut(d) {
                add_into(row, &b.value);
            }
            (v, x.shape.clone())
        };
        let rg = tape.rg(&[self.id, bias.id]);
        Ok(tape.push(shape, value, rg, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(self, c: T) -> Var<'t, T> {
        let tape = self.tape;
        let (value, shape) = {
            let x = tape.node(self.id);
            (x.value.iter().map(|&v| v * c).collect(), x.shape.clone())
        };
        let rg = tape.rg(&[self.id]);
        tape.push(shape, value, rg, Op::Scale(self.id, c))
    }

    /// Elementwise `max(0, x)`. The subgradient at exactly zero is zero.
    pub fn relu(self) -> Var<'t, T> {
        let tape = self.tape;
        let (value, shape) = {
            let x = tape.node(self.id);
            let v = x
                .value
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect();
            (v, x.shape.clone())
        };
        let rg = tape.rg(&[self.id]);
        tape.push(shape, value, rg, Op::Relu(self.id))
    }

    /// Row-wise softmax over the last axis, max-shifted.
    pub fn softmax_rows(self) -> Var<'t, T> {
        let tape = self.tape;
        let (value, shape) = {
            let x = tape.node(self.id);
            let n = *x.shape.last().unwrap();
            let mut out = x.value.clone();
            for row in out.chunks_exact_mut(n) {
                let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / sum;
                }
            }
            (out, x.shape.clone())
        };
        let rg = tape.rg(&[self.id]);
        tape.push(shape, value, rg, Op::SoftmaxRows(self.id))
    }

    /// Normalizes each position over the last axis with the population
    /// variance, then applies `gamma * xhat + beta`.
    pub fn layer_norm(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: T) -> Result<Var<'t, T>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let tape = self.tape;
        let (value, shape, xhat, inv_std) = {
            let x = tape.node(self.id);
            let gn = tape.node(gamma.id);
            let bn = tape.node(beta.id);
            let d = *x.shape.last().unwrap();
            if gn.shape != [d] || bn.shape != [d] {
                return Err(Tape::<T>::dim_err("layer_norm", &x.shape, &gn.shape));
            }
            let dn = T::of(d as f64);
            let rows = x.value.len() / d;
            let mut xhat = vec![T::zero(); x.value.len()];
            let mut inv_std = Vec::with_capacity(rows);
            let mut out = vec![T::zero(); x.value.len()];
            for (r, row) in x.value.chunks_exact(d).enumerate() {
                let mean = row.iter().copied().sum::<T>() / dn;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gn.value[j] + bn.value[j];
                }
            }
            (out, x.shape.clone(), xhat, inv_std)
        };
        let rg = tape.rg(&[self.id, gamma.id, beta.id]);
        Ok(tape.push(
            shape,
            value,
            rg,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    /// Length-preserving cross-correlation with zero padding and stride 1.
    /// `self` is `[L×C_in]`, `w` is `[K×C_in×C_out]` with odd `K`, `b` is
    /// `[C_out]`; the result is `[L×C_out]`.
    pub fn conv1d_same(self, w: Var<'t, T>, b: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&w)?;
        self.same_tape(&b)?;
        let tape = self.tape;
        let (value, shape, kernel) = {
            let x = tape.node(self.id);
            let wn = tape.node(w.id);
            let bn = tape.node(b.id);
            if x.shape.len() != 2 || wn.shape.len() != 3 || wn.shape[1] != x.shape[1] {
                return Err(Tape::<T>::dim_err("conv1d_same", &x.shape, &wn.shape));
            }
            let (kernel, c_in, c_out) = (wn.shape[0], wn.shape[1], wn.shape[2]);
            if kernel % 2 == 0 {
                return Err(Error::Config(format!(
                    "convolution kernel size must be odd, got {kernel}"
                )));
            }
            if bn.shape != [c_out] {
                return Err(Tape::<T>::dim_err("conv1d_same", &wn.shape, &bn.shape));
            }
            let len = x.shape[0];
            let pad = kernel / 2;
            let mut out = vec![T::zero(); len * c_out];
            for l in 0..len {
                let orow = &mut out[l * c_out..(l + 1) * c_out];
                orow.copy_from_slice(&bn.value);
                for k in 0..kernel {
                    let Some(src) = (l + k).checked_sub(pad).filter(|&s| s < len) else {
                        continue;
                    };
                    for ci in 0..c_in {
                        let xval = x.value[src * c_in + ci];
                        let base = (k * c_in + ci) * c_out;
                        let wrow = &wn.value[base..base + c_out];
                        for co in 0..c_out {
                            orow[co] = orow[co] + xval * wrow[co];
                        }
                    }
                }
            }
            (out, vec![len, c_out], kernel)
        };
        let rg = tape.rg(&[self.id, w.id, b.id]);
        Ok(tape.push(
            shape,
            value,
            rg,
            Op::Conv1d {
                x: self.id,
                w: w.id,
                b: b.id,
                kernel,
            },
        ))
    }

    /// Adds a large negative bias to attention scores `[L_q×L_k]` in every
    /// column whose key is masked out.
    pub fn mask_keys(self, key_mask: &[bool]) -> Result<Var<'t, T>> {
        let tape = self.tape;
        let (value, shape) = {
            let x = tape.node(self.id);
            if x.shape.len() != 2 || x.shape[1] != key_mask.len() {
                return Err(Tape::<T>::dim_err("mask_keys", &x.shape, &[key_mask.len()]));
            }
            let neg = T::of(MASKED_SCORE);
            let mut v = x.value.clone();
            for row in v.chunks_exact_mut(key_mask.len()) {
                for (s, &keep) in row.iter_mut().zip(key_mask) {
                    if !keep {
                        *s = *s + neg;
                    }
                }
            }
            (v, x.shape.clone())
        };
        let rg = tape.rg(&[self.id]);
        Ok(tape.push(shape, value, rg, Op::MaskKeys(self.id)))
    }

    /// Multiplies row `i` of `[L×D]` by `mask[i]`.
    pub fn row_mask(self, mask: &[T]) -> Result<Var<'t, T>> {
        let tape = self.tape;
        let (value, shape) = {
            let x = tape.node(self.id);
            if x.shape.len() != 2 || x.shape[0] != mask.len() {
                return Err(Tape::<T>::dim_err("row_mask", &x.shape, &[mask.len()]));
            }
            let d = x.shape[1];
            let mut v = x.value.clone();
            for (row, &m) in v.chunks_exact_mut(d).zip(mask) {
                row.iter_mut().for_each(|e| *e = *e * m);
            }
            (v, x.shape.clone())
        };
        let rg = tape.rg(&[self.id]);
        Ok(tape.push(shape, value, rg, Op::RowMask(self.id, mask.to_vec())))
    }

    /// Mean of the rows of `[L×D]` selected by a 0/1 `mask`, giving `[D]`.
    pub fn masked_mean_rows(self, mask: &[T]) -> Result<Var<'t, T>> {
        let tape = self.tape;
        let (value, d, count) = {
            let x = tape.node(self.id);
            if x.shape.len() != 2 || x.shape[0] != mask.len() {
                return Err(Tape::<T>::dim_err("masked_mean_rows", &x.shape, &[mask.len()]));
            }
            if mask.iter().any(|&m| m != T::zero() && m != T::one()) {
                return Err(Error::Contract("mask entries must be 0 or 1".into()));
            }
            let count = mask.iter().filter(|&&m| m == T::one()).count();
            if count == 0 {
                return Err(Error::EmptySequence);
            }
            let d = x.shape[1];
            let mut sum = vec![T::zero(); d];
            for (row, &m) in x.value.chunks_exact(d).zip(mask) {
                if m == T::one() {
                    add_into(&mut sum, row);
                }
            }
            let c = T::of(count as f64);
            sum.iter_mut().for_each(|v| *v = *v / c);
            (sum, d, count)
        };
        let rg = tape.rg(&[self.id]);
        Ok(tape.push(
            vec![d],
            value,
            rg,
            Op::MaskedMeanRows {
                x: self.id,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Inverted dropout with drop probability `p`. `p == 0` returns `self`
    /// without recording anything.
    pub fn dropout<R: rand::Rng + ?Sized>(self, p: f64, rng: &mut R) -> Result<Var<'t, T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let tape = self.tape;
        let keep = T::of(1.0 / (1.0 - p));
        let (value, shape, mask) = {
            let x = tape.node(self.id);
            let mask: Vec<T> = (0..x.value.len())
                .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
                .collect();
            let v = x.value.iter().zip(&mask).map(|(&a, &m)| a * m).collect();
            (v, x.shape.clone(), mask)
        };
        let rg = tape.rg(&[self.id]);
        Ok(tape.push(shape, value, rg, Op::Dropout(self.id, mask)))
    }

    pub fn sum(self) -> Var<'t, T> {
        let tape = self.tape;
        let value = tape.node(self.id).value.iter().copied().sum::<T>();
        let rg = tape.rg(&[self.id]);
        tape.push(vec![1], vec![value], rg, Op::Sum(self.id))
    }

    /// Mean squared difference between two equally sized values.
    pub fn mse(self, target: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&target)?;
        let tape = self.tape;
        let value = {
            let a = tape.node(self.id);
            let b = tape.node(target.id);
            if a.value.len() != b.value.len() {
                return Err(Tape::<T>::dim_err("mse", &a.shape, &b.shape));
            }
            let s: T = a
                .value
                .iter()
                .zip(&b.value)
                .map(|(&p, &t)| (p - t) * (p - t))
                .sum();
            s / T::of(a.value.len() as f64)
        };
        let rg = tape.rg(&[self.id, target.id]);
        Ok(tape.push(vec![1], vec![value], rg, Op::Mse(self.id, target.id)))
    }
}

/// Concatenates along the last axis; all leading dimensions must agree.
pub fn concat_last<'t, T: Scalar>(xs: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::Contract("concat_last needs at least one input".into()))?;
    let tape = first.tape;
    for x in xs {
        first.same_tape(x)?;
    }
    let (value, shape) = {
        let nodes: Vec<_> = xs.iter().map(|x| tape.node(x.id)).collect();
        let lead = &nodes[0].shape[..nodes[0].shape.len() - 1];
        for n in &nodes[1..] {
            if &n.shape[..n.shape.len() - 1] != lead {
                return Err(Tape::<T>::dim_err("concat_last", &nodes[0].shape, &n.shape));
            }
        }
        let rows = numel(lead);
        let widths: Vec<usize> = nodes.iter().map(|n| *n.shape.last().unwrap()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (n, &w) in nodes.iter().zip(&widths) {
                out.extend_from_slice(&n.value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        (out, shape)
    };
    let ids: Vec<usize> = xs.iter().map(|x| x.id).collect();
    let rg = tape.rg(&ids);
    Ok(tape.push(shape, value, rg, Op::Concat(ids)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_selector() {
        let tape = Tape::new();
        let i2 = tape.leaf(&t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.leaf(&t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(i2.matmul(m).unwrap().value(), vec![1., 2., 3., 4.]);
        let sel = tape.leaf(&t(&[2, 2], &[1., 0., 0., 0.]));
        let r = tape.leaf(&t(&[2, 2], &[5., 6., 7., 8.]));
        assert_eq!(sel.matmul(r).unwrap().value(), vec![5., 6., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::<f64>::zeros(&[2, 3]));
        let b = tape.leaf(&Tensor::<f64>::zeros(&[2, 3]));
        match a.matmul(b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_analytic_values() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[1, 3], &[0., 0., 0.]));
        for v in x.softmax_rows().value() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.leaf(&t(&[1, 2], &[2f64.ln(), 0.]));
        let y = x.softmax_rows().value();
        assert!((y[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((y[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_inputs() {
        let tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::new(vec![1, 3], vec![1000., 1000., 999.]).unwrap());
        let y = x.softmax_rows().value();
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        // Same as the shifted row [1, 1, 0]: e/(2e+1), 1/(2e+1).
        let e = std::f64::consts::E;
        assert!((y[0] as f64 - e / (2.0 * e + 1.0)).abs() < 1e-6);
        assert!((y[2] as f64 - 1.0 / (2.0 * e + 1.0)).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_values() {
        let tape = Tape::new();
        let g = tape.leaf(&t(&[3], &[1., 1., 1.]));
        let b = tape.leaf(&t(&[3], &[0., 0., 0.]));
        let x = tape.leaf(&t(&[1, 3], &[1., 2., 3.]));
        let y = x.layer_norm(g, b, 0.0).unwrap().value();
        let s = 1.5f64.sqrt();
        assert!((y[0] + s).abs() < 1e-12 && y[1].abs() < 1e-12 && (y[2] - s).abs() < 1e-12);
        assert!((y[0] + 1.2247).abs() < 1e-4);
        let c = tape.leaf(&t(&[1, 3], &[5., 5., 5.]));
        assert_eq!(c.layer_norm(g, b, 1e-5).unwrap().value(), vec![0., 0., 0.]);
    }

    #[test]
    fn relu_values_and_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.param(&t(&[3], &[-1., 0., 2.]));
        let y = x.relu();
        assert_eq!(y.value(), vec![0., 0., 2.]);
        let g = y.sum().backward().unwrap();
        assert_eq!(g.wrt(x), vec![0., 0., 1.]);

        let tape = Tape::new();
        let x = tape.param(&t(&[3], &[-1., -2., -3.]));
        let y = x.relu();
        assert_eq!(y.value(), vec![0., 0., 0.]);
        assert_eq!(y.sum().backward().unwrap().wrt(x), vec![0., 0., 0.]);
    }

    #[test]
    fn conv1d_identity_and_hand_sum() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[4, 1], &[1., 1., 1., 1.]));
        let w = tape.leaf(&t(&[3, 1, 1], &[0., 1., 0.]));
        let b = tape.leaf(&t(&[1], &[0.]));
        assert_eq!(x.conv1d_same(w, b).unwrap().value(), vec![1., 1., 1., 1.]);
        let x = tape.leaf(&t(&[4, 1], &[1., 2., 3., 4.]));
        let w = tape.leaf(&t(&[3, 1, 1], &[1., 1., 1.]));
        assert_eq!(x.conv1d_same(w, b).unwrap().value(), vec![3., 6., 9., 7.]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::<f64>::zeros(&[4, 1]));
        let w = tape.leaf(&Tensor::<f64>::zeros(&[2, 1, 1]));
        let b = tape.leaf(&Tensor::<f64>::zeros(&[1]));
        assert!(matches!(x.conv1d_same(w, b), Err(Error::Config(_))));
    }

    #[test]
    fn masked_mean_semantics() {
        let tape = Tape::new();
        let x = tape.leaf(&t(&[2, 1], &[2., 4.]));
        assert_eq!(x.masked_mean_rows(&[1., 1.]).unwrap().value(), vec![3.]);
        let x = tape.leaf(&t(&[2, 1], &[2., 999.]));
        assert_eq!(x.masked_mean_rows(&[1., 0.]).unwrap().value(), vec![2.]);
        assert!(matches!(x.masked_mean_rows(&[0., 0.]), Err(Error::EmptySequence)));
    }

    #[test]
    fn concat_values_shapes_and_gradient_split() {
        let tape = Tape::new();
        let a = tape.param(&t(&[2], &[1., 2.]));
        let b = tape.param(&t(&[1], &[3.]));
        let c = concat_last(&[a, b]).unwrap();
        assert_eq!(c.value(), vec![1., 2., 3.]);
        let g = c.sum().backward().unwrap();
        assert_eq!(g.wrt(a), vec![1., 1.]);
        assert_eq!(g.wrt(b), vec![1.]);

        let wide = tape.leaf(&Tensor::zeros(&[1280]));
        let narrow = tape.leaf(&Tensor::zeros(&[128]));
        assert_eq!(concat_last(&[wide, narrow]).unwrap().shape(), vec![1408]);

        let m = tape.leaf(&Tensor::zeros(&[2, 3]));
        let n = tape.leaf(&Tensor::zeros(&[3, 3]));
        assert!(concat_last(&[m, n]).is_err());
    }

    #[test]
    fn backward_requires_scalar_and_leaves_unused_at_zero() {
        let tape = Tape::new();
        let x = tape.param(&t(&[2], &[1., 2.]));
        let unused = tape.param(&t(&[3], &[1., 2., 3.]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let g = x.sum().backward().unwrap();
        assert_eq!(g.wrt(x), vec![1., 1.]);
        assert_eq!(g.wrt(unused), vec![0., 0., 0.]);
    }

    #[test]
    fn mse_of_self_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(&t(&[3], &[0.5, -1., 2.]));
        let loss = x.mse(x).unwrap();
        assert_eq!(loss.item(), 0.0);
        assert_eq!(loss.backward().unwrap().wrt(x), vec![0., 0., 0.]);
    }

    #[test]
    fn rewind_drops_later_nodes() {
        let tape = Tape::new();
        let x = tape.param(&t(&[2], &[1., 2.]));
        let mark = tape.mark();
        let _ = x.sum();
        assert_eq!(tape.len(), 2);
        tape.rewind(mark);
        assert_eq!(tape.len(), 1);
        assert_eq!(x.sum().backward().unwrap().wrt(x), vec![1., 1.]);
    }

    #[test]
    fn dropout_zero_is_identity_and_positive_scales_kept() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.param(&t(&[4], &[1., 1., 1., 1.]));
        let same = x.dropout(0.0, &mut rng).unwrap();
        assert_eq!(same.id(), x.id());
        let d = x.dropout(0.5, &mut rng).unwrap();
        assert!(d.value().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(x.dropout(1.0, &mut rng).is_err());
    }
}
