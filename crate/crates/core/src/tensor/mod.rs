//! Reverse-mode automatic differentiation over dense, row-major arrays.
//!
//! A [`Graph`] is an append-only tape. Every operation on a [`Tensor`] handle
//! computes its value eagerly and records itself; [`Tensor::backward`] walks
//! the tape in reverse index order, which is a valid reverse topological
//! order because inputs always precede their consumers.

mod backward;
pub mod check;
mod kernels;
mod ops;
mod params;
mod shape;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::scalar::Scalar;

pub use check::grad_check;
pub use kernels::bernstein_basis;
pub use params::{Grads, ParamEntry, ParamGroup, ParamId, ParamStore};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::Invalid {
        op,
        msg: msg.into(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryOp {
    Neg,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Abs,
    Sqrt,
    Square,
    Sin,
    Cos,
}

/// `(outer, axis_len, inner)` factorisation of a shape around one axis.
#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSplit {
    pub outer: usize,
    pub n: usize,
    pub inner: usize,
}

pub(crate) enum Op<T> {
    Leaf,
    Detach,
    Binary(BinaryOp, NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    ScaleShift(NodeId, T),
    Clamp(NodeId, T, T),
    Matmul(NodeId, NodeId),
    Bmm(NodeId, NodeId),
    TransposeLast2(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    SumAll(NodeId),
    SumAxis(NodeId, AxisSplit),
    MaxAxis(NodeId, AxisSplit, Vec<usize>),
    LogSumExp(NodeId, AxisSplit),
    Softmax(NodeId, AxisSplit),
    Reshape(NodeId),
    Slice {
        a: NodeId,
        split: AxisSplit,
        start: usize,
        len: usize,
    },
    Concat {
        parts: Vec<(NodeId, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
    BilinearSample {
        img: NodeId,
        grid: NodeId,
    },
    Bezier {
        cp: NodeId,
        basis: Arc<Vec<T>>,
        samples: usize,
        points: usize,
    },
    Rasterize {
        samples: NodeId,
        sigma: NodeId,
        height: usize,
        width: usize,
        literal: bool,
    },
}

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Arc<Vec<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
    pub leaf_grad: Option<Vec<T>>,
}

/// Tape of recorded operations. Confined to one thread; distinct graphs are
/// independent and may run in parallel.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    param_nodes: RefCell<HashMap<ParamId, NodeId>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: NodeId,
}

impl<T: Scalar> fmt::Debug for Tensor<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.graph.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &node.shape)
            .field("requires_grad", &node.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            param_nodes: RefCell::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Tensor<'_, T> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            requires_grad,
            leaf_grad: None,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn push_shared(
        &self,
        shape: Vec<usize>,
        value: Arc<Vec<T>>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Tensor<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            leaf_grad: None,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn tensor(&self, id: NodeId) -> Tensor<'_, T> {
        Tensor { graph: self, id }
    }

    /// Leaf tensor. With `requires_grad`, gradients accumulate into it on
    /// every backward pass.
    pub fn leaf(&self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Result<Tensor<'_, T>> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(invalid(
                "leaf",
                format!("shape {shape:?} does not describe {} values", data.len()),
            ));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, requires_grad))
    }

    pub fn variable(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<'_, T>> {
        self.leaf(shape, data, true)
    }

    pub fn constant(&self, shape: &[usize], data: Vec<T>) -> Result<Tensor<'_, T>> {
        self.leaf(shape, data, false)
    }

    pub fn scalar(&self, v: T) -> Tensor<'_, T> {
        self.push(vec![1], vec![v], Op::Leaf, false)
    }

    pub fn full(&self, shape: &[usize], v: T) -> Tensor<'_, T> {
        let n = shape.iter().product();
        self.push(shape.to_vec(), vec![v; n], Op::Leaf, false)
    }

    pub fn zeros(&self, shape: &[usize]) -> Tensor<'_, T> {
        self.full(shape, T::zero())
    }

    /// Loads a stored parameter as a gradient-tracking leaf. Repeated loads of
    /// the same parameter return the same node.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<'_, T> {
        if let Some(&node) = self.param_nodes.borrow().get(&id) {
            return self.tensor(node);
        }
        let entry = store.entry(id);
        let t = self.push_shared(
            entry.shape.clone(),
            Arc::clone(&entry.value),
            Op::Leaf,
            true,
        );
        self.param_nodes.borrow_mut().insert(id, t.id);
        t
    }

    /// Gradients accumulated into parameter leaves, laid out like `store`.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Grads<T> {
        let mut grads = store.zero_grads();
        self.add_param_grads_into(&mut grads);
        grads
    }

    pub fn add_param_grads_into(&self, grads: &mut Grads<T>) {
        let nodes = self.nodes.borrow();
        for (&pid, &nid) in self.param_nodes.borrow().iter() {
            if let Some(g) = &nodes[nid].leaf_grad {
                for (dst, src) in grads.by_param[pid.0].iter_mut().zip(g) {
                    *dst += *src;
                }
            }
        }
    }

    /// Clears every accumulated leaf gradient.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.leaf_grad = None;
        }
    }
}

impl<'g, T: Scalar> Tensor<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.graph.nodes.borrow()[self.id].shape[axis]
    }

    pub fn rank(&self) -> usize {
        self.graph.nodes.borrow()[self.id].shape.len()
    }

    pub fn value(&self) -> Arc<Vec<T>> {
        Arc::clone(&self.graph.nodes.borrow()[self.id].value)
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.graph.nodes.borrow()[self.id].value.to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        let nodes = self.graph.nodes.borrow();
        let v = &nodes[self.id].value;
        debug_assert_eq!(v.len(), 1, "item() on tensor with {} elements", v.len());
        v[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self) -> Option<Vec<T>> {
        self.graph.nodes.borrow()[self.id].leaf_grad.clone()
    }

    pub fn is_finite(&self) -> bool {
        self.graph.nodes.borrow()[self.id]
            .value
            .iter()
            .all(|v| v.is_finite())
    }

    /// Back-propagates from this scalar. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&self) -> Result<()> {
        backward::run(self.graph, self.id)
    }
}

#[cfg(test)]
mod tests;
