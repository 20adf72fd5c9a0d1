//! Tape-based reverse-mode automatic differentiation over vectors.
//!
//! Every operation computes its value eagerly and appends a node recording
//! its parents. [`Tape::backward`] walks the nodes once in reverse recording
//! order and accumulates parameter gradients into a [`Gradients`] buffer.
//! Matrices only enter through parameters; all intermediate values are flat
//! vectors.

use std::collections::HashMap;

use thiserror::Error;

use super::params::{Gradients, ParamId, ParamStore};
use crate::distributions::{sigmoid, softmax, softplus, DistributionError, ProposalType, SampleValue};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TapeError {
    #[error("loss node has {0} elements, expected a scalar")]
    NonScalarLoss(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Softmax(NodeId),
    Sum(NodeId),
    Pick(NodeId, usize),
    /// `log q(x | eta)`; the gradient with respect to eta is computed with the value.
    LogProposal {
        eta: NodeId,
        grad: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    /// Empty for parameter nodes, whose values live in the store.
    value: Vec<f64>,
}

pub struct Tape<'p> {
    store: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, NodeId>,
}

impl<'p> Tape<'p> {
    pub fn new(store: &'p ParamStore) -> Self {
        Tape { store, nodes: Vec::new(), param_nodes: HashMap::new() }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, n: NodeId) -> &[f64] {
        match self.nodes[n.0].op {
            Op::Param(id) => &self.store.tensor(id).data,
            _ => &self.nodes[n.0].value,
        }
    }

    pub fn scalar(&self, n: NodeId) -> f64 {
        let v = self.value(n);
        assert_eq!(v.len(), 1, "node is not a scalar");
        v[0]
    }

    /// Leaf node for a parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(&n) = self.param_nodes.get(&id) {
            return n;
        }
        let n = self.push(Op::Param(id), Vec::new());
        self.param_nodes.insert(id, n);
        n
    }

    pub fn constant(&mut self, values: Vec<f64>) -> NodeId {
        self.push(Op::Constant, values)
    }

    pub fn zeros(&mut self, len: usize) -> NodeId {
        self.constant(vec![0.0; len])
    }

    /// `W x` for a parameter matrix `W` of shape `[rows, cols]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> NodeId {
        let id = match self.nodes[w.0].op {
            Op::Param(id) => id,
            _ => panic!("matvec expects a parameter matrix"),
        };
        let t = self.store.tensor(id);
        assert_eq!(t.shape.len(), 2, "matvec expects a matrix");
        let (rows, cols) = (t.shape[0], t.shape[1]);
        let xv = self.value(x);
        assert_eq!(xv.len(), cols, "matvec: matrix has {cols} columns, vector has {} elements", xv.len());
        let out: Vec<f64> = t.data.chunks_exact(cols).map(|row| dot(row, xv)).collect();
        debug_assert_eq!(out.len(), rows);
        self.push(Op::MatVec(w, x), out)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, name: &str, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "{name}: length mismatch {} vs {}", av.len(), bv.len());
        av.iter().zip(bv).map(|(x, y)| f(*x, *y)).collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "add", |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.binary(a, b, "mul", |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a).iter().map(|x| x * c).collect();
        self.push(Op::Scale(a, c), v)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let v = self.value(a).iter().map(|x| f(*x)).collect();
        self.push(op, v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let mut v = Vec::with_capacity(parts.iter().map(|p| self.value(*p).len()).sum());
        for p in parts {
            v.extend_from_slice(self.value(*p));
        }
        self.push(Op::Concat(parts.to_vec()), v)
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.value(a)[start..start + len].to_vec();
        self.push(Op::Slice(a, start), v)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let v = softmax(self.value(a));
        self.push(Op::Softmax(a), v)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().sum();
        self.push(Op::Sum(a), vec![s])
    }

    pub fn pick(&mut self, a: NodeId, index: usize) -> NodeId {
        let v = self.value(a)[index];
        self.push(Op::Pick(a, index), vec![v])
    }

    /// Scalar node holding `log q(x | eta)` for the proposal family `ptype`.
    pub fn log_proposal(
        &mut self,
        eta: NodeId,
        ptype: &ProposalType,
        x: &SampleValue,
    ) -> Result<NodeId, DistributionError> {
        let (lq, grad) = ptype.log_q_with_grad(self.value(eta), x)?;
        Ok(self.push(Op::LogProposal { eta, grad }, vec![lq]))
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let c = self.concat(parts);
        self.sum(c)
    }

    /// Back-propagates from the scalar `loss` and adds `d loss / d param`
    /// into `grads` for every parameter on the tape.
    pub fn backward(&self, loss: NodeId, grads: &mut Gradients) -> Result<(), TapeError> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(TapeError::NonScalarLoss(n));
        }
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        adj[loss.0] = vec![1.0];
        for i in (0..=loss.0).rev() {
            let g = std::mem::take(&mut adj[i]);
            if g.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let buf = grads.buffer_mut(*id, g.len());
                    buf.iter_mut().zip(&g).for_each(|(b, x)| *b += x);
                }
                Op::MatVec(w, x) => {
                    let wt = match self.nodes[w.0].op {
                        Op::Param(id) => self.store.tensor(id),
                        _ => unreachable!(),
                    };
                    let cols = wt.shape[1];
                    let xv = self.value(*x);
                    {
                        let gw = self.adjoint(&mut adj, *w, wt.data.len());
                        for (row, gi) in gw.chunks_exact_mut(cols).zip(&g) {
                            axpy(*gi, xv, row);
                        }
                    }
                    let gx = self.adjoint(&mut adj, *x, cols);
                    for (row, gi) in wt.data.chunks_exact(cols).zip(&g) {
                        axpy(*gi, row, gx);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(self.adjoint(&mut adj, *a, g.len()), &g);
                    accumulate(self.adjoint(&mut adj, *b, g.len()), &g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = self.adjoint(&mut adj, *a, g.len());
                    ga.iter_mut().zip(&g).zip(bv).for_each(|((d, gi), y)| *d += gi * y);
                    let gb = self.adjoint(&mut adj, *b, g.len());
                    gb.iter_mut().zip(&g).zip(av).for_each(|((d, gi), y)| *d += gi * y);
                }
                Op::Scale(a, c) => {
                    let ga = self.adjoint(&mut adj, *a, g.len());
                    ga.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi * c);
                }
                Op::Tanh(a) => self.elementwise(&mut adj, *a, &g, &node.value, |_, y| 1.0 - y * y),
                Op::Sigmoid(a) => self.elementwise(&mut adj, *a, &g, &node.value, |_, y| y * (1.0 - y)),
                Op::Softplus(a) => self.elementwise(&mut adj, *a, &g, &node.value, |x, _| sigmoid(x)),
                Op::Exp(a) => self.elementwise(&mut adj, *a, &g, &node.value, |_, y| y),
                Op::Log(a) => self.elementwise(&mut adj, *a, &g, &node.value, |x, _| 1.0 / x),
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        accumulate(self.adjoint(&mut adj, *p, len), &g[offset..offset + len]);
                        offset += len;
                    }
                }
                Op::Slice(a, start) => {
                    let len = self.value(*a).len();
                    let ga = self.adjoint(&mut adj, *a, len);
                    accumulate(&mut ga[*start..*start + g.len()], &g);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let gy = dot(&g, y);
                    let ga = self.adjoint(&mut adj, *a, y.len());
                    ga.iter_mut().zip(&g).zip(y).for_each(|((d, gi), yi)| *d += yi * (gi - gy));
                }
                Op::Sum(a) => {
                    let len = self.value(*a).len();
                    let ga = self.adjoint(&mut adj, *a, len);
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Pick(a, index) => {
                    let len = self.value(*a).len();
                    self.adjoint(&mut adj, *a, len)[*index] += g[0];
                }
                Op::LogProposal { eta, grad } => {
                    let ge = self.adjoint(&mut adj, *eta, grad.len());
                    ge.iter_mut().zip(grad).for_each(|(d, gi)| *d += g[0] * gi);
                }
            }
        }
        Ok(())
    }

    fn adjoint<'a>(&self, adj: &'a mut [Vec<f64>], n: NodeId, len: usize) -> &'a mut [f64] {
        let a = &mut adj[n.0];
        if a.is_empty() {
            a.resize(len, 0.0);
        }
        a
    }

    fn elementwise(&self, adj: &mut [Vec<f64>], a: NodeId, g: &[f64], y: &[f64], deriv: impl Fn(f64, f64) -> f64) {
        let x = self.value(a);
        let ga = self.adjoint(adj, a, g.len());
        for i in 0..g.len() {
            ga[i] += g[i] * deriv(x[i], y[i]);
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for k in 0..4 {
            acc[k] += a[4 * i + k] * b[4 * i + k];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += alpha * xi);
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
