//! Taped reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every tensor operation as it executes (define-by-run).
//! The backward pass is itself expressed through the same recorded operation
//! set, so a gradient returned by [`Var::grad_graph`] is an ordinary [`Var`]
//! that can be differentiated again. That second differentiation level is
//! what makes the parameter-gradient of a penalty on input-gradients exact
//! rather than approximated.
//!
//! Graphs are single-threaded (`Rc` handles); tensors are immutable values,
//! so parallel callers build one graph per worker.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Operation kinds recorded on the tape. Payloads carry everything needed
/// to re-execute the node from its parents' values.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    /// Differentiable input (model parameter or data batch).
    Leaf,
    /// Detached value: gradients stop here.
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    /// `(n, k) @ (k, m)`.
    Matmul,
    Transpose,
    Relu,
    /// `max(x, c)` with detached mask semantics.
    ClampMin(f64),
    Exp,
    Log,
    Sqrt,
    /// Sum of all elements, producing a rank-0 tensor.
    Sum,
    /// Rank-0 scalar replicated to `shape`.
    ExpandScalar(Vec<usize>),
    /// `(n, m) -> (n,)`, summing each row.
    RowSum,
    /// `(n,) -> (n, m)`, replicating each entry across `m` columns.
    BroadcastCol(usize),
    /// `(n, m) -> (m,)`, summing each column.
    ColSum,
    /// `(m,) -> (n, m)`, replicating the vector as `n` identical rows.
    BroadcastRow(usize),
    Reshape(Vec<usize>),
    /// `out[i] = if idx[i] < 0 { 0 } else { x[idx[i]] }`, out has `shape`.
    /// Covers im2col, axis permutations, and padding in one linear primitive.
    Gather { idx: Rc<Vec<i64>>, shape: Vec<usize> },
    /// Adjoint of `Gather`: `out[idx[i]] += x[i]` into zeros of `shape`.
    ScatterAdd { idx: Rc<Vec<i64>>, shape: Vec<usize> },
    /// `(n, k) -> (n,)`: picks `x[i, labels[i]]`.
    GatherLabels { labels: Rc<Vec<usize>> },
    /// Adjoint of `GatherLabels`: `(n,) -> (n, classes)` one-hot scatter.
    ScatterLabels { labels: Rc<Vec<usize>>, classes: usize },
}

#[derive(Debug)]
struct Node {
    op: Op,
    parents: Vec<usize>,
    value: Tensor,
}

#[derive(Debug, Default)]
struct Tape {
    nodes: Vec<Node>,
}

/// Handle to a recorded computation. Cloning shares the underlying tape.
#[derive(Debug, Clone, Default)]
pub struct Graph(Rc<RefCell<Tape>>);

/// A value recorded on a [`Graph`]. The shape is fixed at creation.
#[derive(Debug, Clone)]
pub struct Var {
    graph: Graph,
    idx: usize,
}

fn eval(op: &Op, parents: &[&Tensor]) -> Tensor {
    match op {
        Op::Leaf | Op::Constant => unreachable!("leaves are never re-evaluated"),
        Op::Add => parents[0].zip(parents[1], "add", |a, b| a + b).unwrap(),
        Op::Sub => parents[0].zip(parents[1], "sub", |a, b| a - b).unwrap(),
        Op::Mul => parents[0].zip(parents[1], "mul", |a, b| a * b).unwrap(),
        Op::Div => parents[0].zip(parents[1], "div", |a, b| a / b).unwrap(),
        Op::Neg => parents[0].map(|v| -v),
        Op::Scale(c) => parents[0].map(|v| v * c),
        Op::Matmul => {
            let (a, b) = (parents[0], parents[1]);
            let (n, k) = (a.shape()[0], a.shape()[1]);
            let m = b.shape()[1];
            Tensor::new(vec![n, m], matmul(a.data(), b.data(), n, k, m)).unwrap()
        }
        Op::Transpose => {
            let a = parents[0];
            let (n, m) = (a.shape()[0], a.shape()[1]);
            let mut out = vec![0.0; n * m];
            for i in 0..n {
                for j in 0..m {
                    out[j * n + i] = a.data()[i * m + j];
                }
            }
            Tensor::new(vec![m, n], out).unwrap()
        }
        Op::Relu => parents[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::ClampMin(c) => parents[0].map(|v| v.max(*c)),
        Op::Exp => parents[0].map(f64::exp),
        Op::Log => parents[0].map(f64::ln),
        Op::Sqrt => parents[0].map(f64::sqrt),
        Op::Sum => Tensor::scalar(parents[0].data().iter().sum()),
        Op::ExpandScalar(shape) => Tensor::full(shape.clone(), parents[0].item()),
        Op::RowSum => {
            let (n, m) = parents[0].as_rows();
            let d = parents[0].data();
            let out = (0..n).map(|i| d[i * m..(i + 1) * m].iter().sum()).collect();
            Tensor::new(vec![n], out).unwrap()
        }
        Op::BroadcastCol(m) => {
            let src = parents[0].data();
            let n = src.len();
            let mut out = Vec::with_capacity(n * m);
            for &v in src {
                out.extend(std::iter::repeat(v).take(*m));
            }
            Tensor::new(vec![n, *m], out).unwrap()
        }
        Op::ColSum => {
            let (n, m) = parents[0].as_rows();
            let d = parents[0].data();
            let mut out = vec![0.0; m];
            for i in 0..n {
                for j in 0..m {
                    out[j] += d[i * m + j];
                }
            }
            Tensor::new(vec![m], out).unwrap()
        }
        Op::BroadcastRow(n) => {
            let src = parents[0].data();
            let m = src.len();
            let mut out = Vec::with_capacity(n * m);
            for _ in 0..*n {
                out.extend_from_slice(src);
            }
            Tensor::new(vec![*n, m], out).unwrap()
        }
        Op::Reshape(shape) => parents[0].reshaped(shape.clone()).unwrap(),
        Op::Gather { idx, shape } => {
            let src = parents[0].data();
            let out = idx
                .iter()
                .map(|&i| if i < 0 { 0.0 } else { src[i as usize] })
                .collect();
            Tensor::new(shape.clone(), out).unwrap()
        }
        Op::ScatterAdd { idx, shape } => {
            let src = parents[0].data();
            let mut out = Tensor::zeros(shape.clone());
            for (v, &i) in src.iter().zip(idx.iter()) {
                if i >= 0 {
                    out.data_mut()[i as usize] += v;
                }
            }
            out
        }
        Op::GatherLabels { labels } => {
            let (n, k) = parents[0].as_rows();
            debug_assert_eq!(n, labels.len());
            let d = parents[0].data();
            let out = labels.iter().enumerate().map(|(i, &l)| d[i * k + l]).collect();
            Tensor::new(vec![n], out).unwrap()
        }
        Op::ScatterLabels { labels, classes } => {
            let src = parents[0].data();
            let n = src.len();
            let mut out = Tensor::zeros(vec![n, *classes]);
            for (i, (&v, &l)) in src.iter().zip(labels.iter()).enumerate() {
                out.data_mut()[i * classes + l] = v;
            }
            out
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.0.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var {
        self.push_value(Op::Leaf, vec![], value)
    }

    /// Record a detached value: no gradient flows into it.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push_value(Op::Constant, vec![], value)
    }

    fn push_value(&self, op: Op, parents: Vec<usize>, value: Tensor) -> Var {
        let mut tape = self.0.borrow_mut();
        tape.nodes.push(Node { op, parents, value });
        Var { graph: self.clone(), idx: tape.nodes.len() - 1 }
    }

    fn push(&self, op: Op, parents: Vec<usize>) -> Var {
        let mut tape = self.0.borrow_mut();
        let value = {
            let pvals: Vec<&Tensor> = parents.iter().map(|&p| &tape.nodes[p].value).collect();
            eval(&op, &pvals)
        };
        tape.nodes.push(Node { op, parents, value });
        Var { graph: self.clone(), idx: tape.nodes.len() - 1 }
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.0.borrow().nodes[idx].value.shape().to_vec()
    }

    fn same_graph(&self, other: &Graph) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Re-execute every recorded operation from the stored leaf values and
    /// return all node values. Used to verify replay determinism.
    pub fn replay_values(&self) -> Vec<Tensor> {
        let tape = self.0.borrow();
        let mut values: Vec<Tensor> = Vec::with_capacity(tape.nodes.len());
        for node in &tape.nodes {
            let v = match node.op {
                Op::Leaf | Op::Constant => node.value.clone(),
                _ => {
                    let pvals: Vec<&Tensor> = node.parents.iter().map(|&p| &values[p]).collect();
                    eval(&node.op, &pvals)
                }
            };
            values.push(v);
        }
        values
    }

    /// Stored value of every node, in recording order.
    pub fn node_values(&self) -> Vec<Tensor> {
        self.0.borrow().nodes.iter().map(|n| n.value.clone()).collect()
    }
}

impl Var {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn value(&self) -> Tensor {
        self.graph.0.borrow().nodes[self.idx].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.shape_of(self.idx)
    }

    pub fn item(&self) -> f64 {
        self.graph.0.borrow().nodes[self.idx].value.item()
    }

    fn binary(&self, other: &Var, op: Op, name: &'static str) -> Result<Var> {
        if !self.graph.same_graph(&other.graph) {
            return Err(Error::Graph(format!("{name}: operands live on different graphs")));
        }
        let (ls, rs) = (self.shape(), other.shape());
        if ls != rs {
            return Err(Error::ShapeMismatch { op: name, lhs: ls, rhs: rs });
        }
        Ok(self.graph.push(op, vec![self.idx, other.idx]))
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Add, "add")
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Sub, "sub")
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Mul, "mul")
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        self.binary(other, Op::Div, "div")
    }

    pub fn neg(&self) -> Var {
        self.graph.push(Op::Neg, vec![self.idx])
    }

    pub fn scale(&self, c: f64) -> Var {
        self.graph.push(Op::Scale(c), vec![self.idx])
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        if !self.graph.same_graph(&other.graph) {
            return Err(Error::Graph("matmul: operands live on different graphs".into()));
        }
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 2 || rs.len() != 2 || ls[1] != rs[0] {
            return Err(Error::ShapeMismatch { op: "matmul", lhs: ls, rhs: rs });
        }
        Ok(self.graph.push(Op::Matmul, vec![self.idx, other.idx]))
    }

    pub fn transpose(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "transpose", lhs: s, rhs: vec![] });
        }
        Ok(self.graph.push(Op::Transpose, vec![self.idx]))
    }

    pub fn relu(&self) -> Var {
        self.graph.push(Op::Relu, vec![self.idx])
    }

    pub fn clamp_min(&self, c: f64) -> Var {
        self.graph.push(Op::ClampMin(c), vec![self.idx])
    }

    pub fn exp(&self) -> Var {
        self.graph.push(Op::Exp, vec![self.idx])
    }

    /// Natural logarithm. Gradient is undefined at 0.
    pub fn log(&self) -> Var {
        self.graph.push(Op::Log, vec![self.idx])
    }

    /// Square root. Gradient is undefined at 0; compose with
    /// [`Var::clamp_min`] where inputs can vanish.
    pub fn sqrt(&self) -> Var {
        self.graph.push(Op::Sqrt, vec![self.idx])
    }

    pub fn sum(&self) -> Var {
        self.graph.push(Op::Sum, vec![self.idx])
    }

    pub fn mean(&self) -> Var {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Row sums of a rank-2 tensor: `(n, m) -> (n,)`.
    pub fn rowsum(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "rowsum", lhs: s, rhs: vec![] });
        }
        Ok(self.graph.push(Op::RowSum, vec![self.idx]))
    }

    /// Column sums of a rank-2 tensor: `(n, m) -> (m,)`.
    pub fn colsum(&self) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "colsum", lhs: s, rhs: vec![] });
        }
        Ok(self.graph.push(Op::ColSum, vec![self.idx]))
    }

    /// `(n,) -> (n, m)`: each entry replicated across `m` columns.
    pub fn broadcast_col(&self, m: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::ShapeMismatch { op: "broadcast_col", lhs: s, rhs: vec![m] });
        }
        Ok(self.graph.push(Op::BroadcastCol(m), vec![self.idx]))
    }

    /// `(m,) -> (n, m)`: the vector replicated as `n` identical rows.
    pub fn broadcast_row(&self, n: usize) -> Result<Var> {
        let s = self.shape();
        if s.len() != 1 {
            return Err(Error::ShapeMismatch { op: "broadcast_row", lhs: s, rhs: vec![n] });
        }
        Ok(self.graph.push(Op::BroadcastRow(n), vec![self.idx]))
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value().numel() {
            return Err(Error::ShapeMismatch { op: "reshape", lhs: self.shape(), rhs: shape });
        }
        Ok(self.graph.push(Op::Reshape(shape), vec![self.idx]))
    }

    pub(crate) fn gather(&self, idx: Rc<Vec<i64>>, shape: Vec<usize>) -> Var {
        debug_assert_eq!(idx.len(), shape.iter().product::<usize>());
        self.graph.push(Op::Gather { idx, shape }, vec![self.idx])
    }

    pub(crate) fn scatter_add(&self, idx: Rc<Vec<i64>>, shape: Vec<usize>) -> Var {
        self.graph.push(Op::ScatterAdd { idx, shape }, vec![self.idx])
    }

    fn gather_labels(&self, labels: Rc<Vec<usize>>) -> Var {
        self.graph.push(Op::GatherLabels { labels }, vec![self.idx])
    }

    fn scatter_labels(&self, labels: Rc<Vec<usize>>, classes: usize) -> Var {
        self.graph.push(Op::ScatterLabels { labels, classes }, vec![self.idx])
    }

    /// Dot product of two equally shaped rank-1 variables.
    pub fn dot(&self, other: &Var) -> Result<Var> {
        let (ls, rs) = (self.shape(), other.shape());
        if ls.len() != 1 || ls != rs {
            return Err(Error::ShapeMismatch { op: "dot", lhs: ls, rhs: rs });
        }
        Ok(self.mul(other)?.sum())
    }

    /// Euclidean norm of all elements. Gradient is undefined at the origin.
    pub fn l2_norm(&self) -> Var {
        self.mul(self).expect("same shape").sum().sqrt()
    }

    /// Rows divided by `max(row l2 norm, floor)`. Rows with norm below the
    /// floor are scaled by `1/floor`, so exact-zero rows stay exactly zero.
    pub fn l2_normalize_rows(&self, floor: f64) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch { op: "l2_normalize_rows", lhs: s, rhs: vec![] });
        }
        let norms = self.mul(self)?.rowsum()?.sqrt().clamp_min(floor);
        self.div(&norms.broadcast_col(s[1])?)
    }

    /// Mean softmax cross-entropy of `(n, k)` logits against class labels.
    ///
    /// Numerically stabilized with a detached per-row max shift, which is
    /// exact: `logsumexp(z) = log(sum(exp(z - c))) + c` holds identically for
    /// any constant `c`, so derivatives of every order are unaffected.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Var> {
        let s = self.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let value = self.value();
        let rowmax: Vec<f64> = (0..n)
            .map(|i| value.data()[i * k..(i + 1) * k].iter().cloned().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let shift = self.graph.constant(Tensor::from_vec(rowmax));
        let centered = self.sub(&shift.broadcast_col(k)?)?;
        let lse = centered.exp().rowsum()?.log().add(&shift)?;
        let picked = self.gather_labels(Rc::new(labels.to_vec()));
        lse.sub(&picked).map(|ce| ce.mean())
    }

    /// Gradients of a scalar `self` with respect to `wrt`, as plain tensors.
    /// The tape is restored to its pre-call length afterwards.
    pub fn grad(&self, wrt: &[&Var]) -> Result<Vec<Tensor>> {
        let len0 = self.graph.len();
        let vars = self.backward_impl(wrt)?;
        let values = vars.iter().map(Var::value).collect();
        self.graph.0.borrow_mut().nodes.truncate(len0);
        Ok(values)
    }

    /// Gradients of a scalar `self` with respect to `wrt`, recorded on the
    /// extended graph so they can be differentiated again.
    pub fn grad_graph(&self, wrt: &[&Var]) -> Result<Vec<Var>> {
        self.backward_impl(wrt)
    }

    fn backward_impl(&self, wrt: &[&Var]) -> Result<Vec<Var>> {
        if self.value().numel() != 1 {
            return Err(Error::Graph(format!(
                "backward requires a scalar objective, got shape {:?}",
                self.shape()
            )));
        }
        for v in wrt {
            if !self.graph.same_graph(&v.graph) {
                return Err(Error::Graph(
                    "backward: a requested variable is not on the objective's graph".into(),
                ));
            }
        }
        let n0 = self.idx + 1;
        let mut adjoints: Vec<Option<Var>> = vec![None; n0];
        adjoints[self.idx] = Some(self.graph.constant(Tensor::full(self.shape(), 1.0)));

        for i in (0..n0).rev() {
            let Some(adj) = adjoints[i].clone() else { continue };
            let (op, parents) = {
                let tape = self.graph.0.borrow();
                (tape.nodes[i].op.clone(), tape.nodes[i].parents.clone())
            };
            let node = Var { graph: self.graph.clone(), idx: i };
            for (slot, contribution) in vjp(&op, &parents, &node, &adj)? {
                let parent = parents[slot];
                adjoints[parent] = Some(match adjoints[parent].take() {
                    Some(prev) => prev.add(&contribution)?,
                    None => contribution,
                });
            }
        }

        wrt.iter()
            .map(|v| {
                Ok(match adjoints.get(v.idx).and_then(|a| a.clone()) {
                    Some(a) => a,
                    None => self.graph.constant(Tensor::zeros(v.shape())),
                })
            })
            .collect()
    }
}

/// Vector-Jacobian product of one node: contributions to each parent's
/// adjoint, expressed as further graph operations so they remain
/// differentiable.
fn vjp(op: &Op, parents: &[usize], node: &Var, adj: &Var) -> Result<Vec<(usize, Var)>> {
    let g = &node.graph;
    let pvar = |slot: usize| Var { graph: g.clone(), idx: parents[slot] };
    Ok(match op {
        Op::Leaf | Op::Constant => vec![],
        Op::Add => vec![(0, adj.clone()), (1, adj.clone())],
        Op::Sub => vec![(0, adj.clone()), (1, adj.neg())],
        Op::Mul => vec![(0, adj.mul(&pvar(1))?), (1, adj.mul(&pvar(0))?)],
        Op::Div => {
            // y = a/b: dy/da = 1/b, dy/db = -y/b.
            let b = pvar(1);
            vec![(0, adj.div(&b)?), (1, adj.mul(node)?.div(&b)?.neg())]
        }
        Op::Neg => vec![(0, adj.neg())],
        Op::Scale(c) => vec![(0, adj.scale(*c))],
        Op::Matmul => {
            let (a, b) = (pvar(0), pvar(1));
            vec![
                (0, adj.matmul(&b.transpose()?)?),
                (1, a.transpose()?.matmul(adj)?),
            ]
        }
        Op::Transpose => vec![(0, adj.transpose()?)],
        Op::Relu => {
            // Mask is detached: the derivative of the gate itself is zero
            // almost everywhere, with relu'(0) taken as 0.
            let mask = g.constant(pvar(0).value().map(|v| if v > 0.0 { 1.0 } else { 0.0 }));
            vec![(0, adj.mul(&mask)?)]
        }
        Op::ClampMin(c) => {
            let c = *c;
            let mask = g.constant(pvar(0).value().map(|v| if v > c { 1.0 } else { 0.0 }));
            vec![(0, adj.mul(&mask)?)]
        }
        Op::Exp => vec![(0, adj.mul(node)?)],
        Op::Log => vec![(0, adj.div(&pvar(0))?)],
        Op::Sqrt => vec![(0, adj.div(node)?.scale(0.5))],
        Op::Sum => vec![(0, g.push(Op::ExpandScalar(pvar(0).shape()), vec![adj.idx]))],
        Op::ExpandScalar(_) => vec![(0, adj.sum())],
        Op::RowSum => {
            let m = pvar(0).shape()[1];
            vec![(0, adj.broadcast_col(m)?)]
        }
        Op::BroadcastCol(_) => vec![(0, adj.rowsum()?)],
        Op::ColSum => {
            let n = pvar(0).shape()[0];
            vec![(0, adj.broadcast_row(n)?)]
        }
        Op::BroadcastRow(_) => vec![(0, adj.colsum()?)],
        Op::Reshape(_) => vec![(0, adj.reshape(pvar(0).shape())?)],
        Op::Gather { idx, .. } => vec![(0, adj.scatter_add(idx.clone(), pvar(0).shape()))],
        Op::ScatterAdd { idx, .. } => vec![(0, adj.gather(idx.clone(), pvar(0).shape()))],
        Op::GatherLabels { labels } => {
            let classes = pvar(0).shape()[1];
            vec![(0, adj.scatter_labels(labels.clone(), classes))]
        }
        Op::ScatterLabels { labels, .. } => vec![(0, adj.gather_labels(labels.clone()))],
    })
}

/// Max-over-coordinates relative error between the recorded gradient of `f`
/// and a central finite difference with step `h`:
/// `max_k |analytic_k - fd_k| / max(1, |analytic_k|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    let eval_at = |t: &Tensor| -> Result<f64> {
        let g = Graph::new();
        let xv = g.leaf(t.clone());
        let y = f(&xv)?;
        if y.value().numel() != 1 {
            return Err(Error::Graph("grad_check requires a scalar function".into()));
        }
        Ok(y.item())
    };

    let g = Graph::new();
    let xv = g.leaf(x.clone());
    let y = f(&xv)?;
    let analytic = y.grad(&[&xv])?.remove(0);

    let mut worst = 0.0_f64;
    for k in 0..x.numel() {
        let mut xp = x.clone();
        xp.data_mut()[k] += h;
        let mut xm = x.clone();
        xm.data_mut()[k] -= h;
        let fd = (eval_at(&xp)? - eval_at(&xm)?) / (2.0 * h);
        let a = analytic.data()[k];
        worst = worst.max((a - fd).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &Graph, data: Vec<f64>) -> Var {
        g.leaf(Tensor::from_vec(data))
    }

    #[test]
    fn relu_definition() {
        let g = Graph::new();
        let x = leaf(&g, vec![-1.0, 0.0, 2.0]);
        assert_eq!(x.relu().value().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn dot_of_orthogonal_basis_vectors() {
        let g = Graph::new();
        let a = leaf(&g, vec![1.0, 0.0, 0.0]);
        let b = leaf(&g, vec![0.0, 1.0, 0.0]);
        assert_eq!(a.dot(&b).unwrap().item(), 0.0);
    }

    #[test]
    fn uniform_two_class_cross_entropy_is_ln2() {
        let g = Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let loss = logits.softmax_cross_entropy(&[0]).unwrap();
        assert!((loss.item() - 2.0_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label_rejected() {
        let g = Graph::new();
        let logits = g.leaf(Tensor::new(vec![1, 3], vec![0.0, 0.0, 0.0]).unwrap());
        assert!(logits.softmax_cross_entropy(&[3]).is_err());
    }

    #[test]
    fn shape_mismatch_names_operation_and_shapes() {
        let g = Graph::new();
        let a = leaf(&g, vec![1.0, 2.0]);
        let b = leaf(&g, vec![1.0, 2.0, 3.0]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains("[2]") && err.contains("[3]"), "{err}");
    }

    #[test]
    fn square_gradient() {
        // y = x^2 at x = 3 -> dy/dx = 6.
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let dx = y.grad(&[&x]).unwrap().remove(0);
        assert_eq!(dx.item(), 6.0);
    }

    #[test]
    fn quadratic_form_gradient() {
        // y = dot(x, x)/2 -> gradient x.
        let g = Graph::new();
        let x = leaf(&g, vec![1.0, 2.0, 3.0]);
        let y = x.dot(&x).unwrap().scale(0.5);
        let dx = y.grad(&[&x]).unwrap().remove(0);
        assert_eq!(dx.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn second_order_cube() {
        // y0 = x^3 at x = 2; d(dy0/dx)/dx = 6x = 12.
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let y0 = x.mul(&x).unwrap().mul(&x).unwrap();
        let dy = y0.grad_graph(&[&x]).unwrap().remove(0);
        assert_eq!(dy.item(), 12.0); // 3x^2
        let d2 = dy.grad(&[&x]).unwrap().remove(0);
        assert_eq!(d2.item(), 12.0); // 6x
    }

    #[test]
    fn non_scalar_objective_rejected() {
        let g = Graph::new();
        let x = leaf(&g, vec![1.0, 2.0]);
        assert!(x.grad(&[&x]).is_err());
    }

    #[test]
    fn foreign_variable_rejected() {
        let g1 = Graph::new();
        let g2 = Graph::new();
        let x = g1.leaf(Tensor::scalar(1.0));
        let z = g2.leaf(Tensor::scalar(1.0));
        let y = x.mul(&x).unwrap();
        assert!(y.grad(&[&z]).is_err());
    }

    #[test]
    fn unreached_variable_gets_zero_gradient() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(2.0));
        let unused = g.leaf(Tensor::scalar(5.0));
        let y = x.mul(&x).unwrap();
        let dz = y.grad(&[&unused]).unwrap().remove(0);
        assert_eq!(dz.item(), 0.0);
    }

    #[test]
    fn grad_check_sum_of_squares() {
        let x = Tensor::from_vec((0..10).map(|i| 0.3 * i as f64 - 1.2).collect());
        let err = grad_check(|v| Ok(v.mul(v)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "error {err}");
    }

    #[test]
    fn grad_check_constant_function() {
        let x = Tensor::from_vec(vec![1.0, -2.0, 0.5]);
        let err = grad_check(|v| Ok(v.graph().constant(Tensor::scalar(4.0)).add(&v.sum().scale(0.0))?), &x, 1e-5)
            .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn grad_check_softmax_cross_entropy_composite() {
        // One dense layer into cross-entropy, differentiated w.r.t. the input.
        let x = Tensor::new(vec![2, 3], vec![0.1, -0.4, 0.7, 0.2, 0.0, -0.3]).unwrap();
        let w = Tensor::new(vec![3, 2], vec![0.5, -0.2, 0.3, 0.8, -0.6, 0.1]).unwrap();
        let err = grad_check(
            |v| {
                let wv = v.graph().constant(w.clone());
                v.matmul(&wv)?.softmax_cross_entropy(&[0, 1])
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "error {err}");
    }

    #[test]
    fn derivative_is_linear() {
        // backward(a*f + b*g) = a*backward(f) + b*backward(g).
        let x0 = Tensor::from_vec(vec![0.4, -1.1, 2.2]);
        let (a, b) = (1.7, -0.6);
        let f = |v: &Var| v.mul(v).unwrap().sum();
        let gg = |v: &Var| v.exp().sum();

        let g = Graph::new();
        let x = g.leaf(x0.clone());
        let combined = f(&x).scale(a).add(&gg(&x).scale(b)).unwrap();
        let dc = combined.grad(&[&x]).unwrap().remove(0);

        let g2 = Graph::new();
        let x2 = g2.leaf(x0.clone());
        let df = f(&x2).grad(&[&x2]).unwrap().remove(0);
        let dg = gg(&x2).grad(&[&x2]).unwrap().remove(0);
        for k in 0..3 {
            let expect = a * df.data()[k] + b * dg.data()[k];
            assert!((dc.data()[k] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_reproduces_values_bit_for_bit() {
        let g = Graph::new();
        let x = leaf(&g, vec![0.3, -0.7, 1.9, 0.0]);
        let y = x.relu().exp().sum().sqrt();
        let _ = y.grad_graph(&[&x]).unwrap();
        let stored = g.node_values();
        let replayed = g.replay_values();
        assert_eq!(stored.len(), replayed.len());
        for (s, r) in stored.iter().zip(&replayed) {
            assert_eq!(s.data(), r.data());
        }
    }

    #[test]
    fn grad_truncates_tape() {
        let g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = x.mul(&x).unwrap();
        let len_before = g.len();
        let _ = y.grad(&[&x]).unwrap();
        assert_eq!(g.len(), len_before);
    }

    #[test]
    fn normalize_rows_keeps_zero_rows_zero() {
        let g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 2], vec![3.0, 4.0, 0.0, 0.0]).unwrap());
        let n = x.l2_normalize_rows(1e-12).unwrap();
        let v = n.value();
        assert!((v.data()[0] - 0.6).abs() < 1e-15);
        assert!((v.data()[1] - 0.8).abs() < 1e-15);
        assert_eq!(&v.data()[2..], &[0.0, 0.0]);
        assert!(v.is_finite());
    }

    #[test]
    fn second_order_through_normalized_gradient() {
        // c = dot(k, ghat) where ghat is the normalized input-gradient of a
        // tiny quadratic-in-x model with a parameter w. d c / d w must match
        // finite differences in w.
        let xval = Tensor::from_vec(vec![0.8, -0.5]);
        let kval = Tensor::from_vec(vec![0.6, 0.8]);
        let delta_of = |wv: f64| -> f64 {
            let g = Graph::new();
            let x = g.leaf(xval.clone());
            let w = g.leaf(Tensor::scalar(wv));
            let wx = x.scale(1.0).sum().mul(&w).unwrap(); // w * sum(x)
            let y = wx.mul(&wx).unwrap().add(&x.mul(&x).unwrap().sum().mul(&w).unwrap()).unwrap();
            let gx = y.grad_graph(&[&x]).unwrap().remove(0);
            let gmat = gx.reshape(vec![1, 2]).unwrap().l2_normalize_rows(1e-12).unwrap();
            let k = g.constant(kval.clone()).reshape(vec![1, 2]).unwrap();
            gmat.mul(&k).unwrap().sum().item()
        };
        let exact = {
            let g = Graph::new();
            let x = g.leaf(xval.clone());
            let w = g.leaf(Tensor::scalar(0.9));
            let wx = x.scale(1.0).sum().mul(&w).unwrap();
            let y = wx.mul(&wx).unwrap().add(&x.mul(&x).unwrap().sum().mul(&w).unwrap()).unwrap();
            let gx = y.grad_graph(&[&x]).unwrap().remove(0);
            let gmat = gx.reshape(vec![1, 2]).unwrap().l2_normalize_rows(1e-12).unwrap();
            let k = g.constant(kval.clone()).reshape(vec![1, 2]).unwrap();
            let c = gmat.mul(&k).unwrap().sum();
            c.grad(&[&w]).unwrap().remove(0).item()
        };
        let h = 1e-6;
        let fd = (delta_of(0.9 + h) - delta_of(0.9 - h)) / (2.0 * h);
        assert!(
            (exact - fd).abs() / exact.abs().max(1.0) < 1e-6,
            "exact {exact} vs fd {fd}"
        );
    }
}
