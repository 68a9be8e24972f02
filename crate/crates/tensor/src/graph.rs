//! Tape-based reverse-mode differentiation.
//!
//! Every primitive applied to a [`Var`] appends a node to its [`Graph`]. The
//! tape is append-only, so node order is already a topological order and
//! [`Graph::backward`] simply walks it in reverse.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::float::Float;
use crate::ops::conv::ConvGeom;
use crate::ops::elementwise::{BinaryKind, UnaryKind};
use crate::ops::reduce::ReduceKind;
use crate::ops::shape::{PadMode, UpsampleMode};
use crate::ops::{conv, elementwise, linalg, reduce, scan, shape};
use crate::tensor::Tensor;

pub(crate) enum Op<T> {
    Leaf,
    Binary { kind: BinaryKind, a: usize, b: usize },
    Unary { kind: UnaryKind, x: usize },
    Scale { x: usize, factor: T },
    AddScalar { x: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    MatMul { a: usize, b: usize, trans_b: bool },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Reduce { x: usize, axis: usize, kind: ReduceKind, argmax: Vec<u32> },
    SumAll { x: usize },
    Softmax { x: usize, axis: usize },
    LayerNorm { x: usize, rstd: Vec<T> },
    Concat { parts: Vec<usize>, axis: usize },
    Slice { x: usize, axis: usize, start: usize },
    Reshape { x: usize },
    Permute { x: usize, perm: Vec<usize> },
    Pad2d { x: usize, pads: [usize; 4], mode: PadMode },
    Upsample2x { x: usize, mode: UpsampleMode },
    AdaptiveAvgPool { x: usize },
    SelectiveScan { x: usize, delta: usize, a: usize, b: usize, c: usize, states: Vec<T> },
}

pub(crate) struct Node<T> {
    pub value: Rc<Tensor<T>>,
    pub op: Op<T>,
    pub requires_grad: bool,
}

/// Recording of executed primitives. One graph serves exactly one backward
/// pass; build a fresh graph per forward evaluation.
pub struct Graph<T: Float = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Graph`].
pub struct Var<'g, T: Float = f32> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Float> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Float> Copy for Var<'_, T> {}

impl<T: Float> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            consumed: Cell::new(false),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, true)
    }

    /// Leaf without gradient tracking.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_leaf(value, false)
    }

    fn push_leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|&p| nodes[p].requires_grad);
        // Nothing upstream needs a gradient: drop the op and any saved buffers.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value(&self, id: usize) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    pub(crate) fn check<'g>(&'g self, v: Var<'g, T>) -> Result<usize> {
        if std::ptr::eq(self, v.graph) {
            Ok(v.id)
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    /// Replays the tape in reverse from the scalar `loss`, returning the
    /// gradient of every node that requires one.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<Gradients<T>> {
        let loss_id = self.check(loss)?;
        let nodes = self.nodes.borrow();
        if nodes[loss_id].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(nodes[loss_id].value.shape().to_vec()));
        }
        if self.consumed.replace(true) {
            return Err(TensorError::GraphConsumed);
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss_id] = Some(Tensor::full(nodes[loss_id].value.shape().to_vec(), T::one()));
        for id in (0..=loss_id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, pg) in backward_op(&nodes, node, &g)? {
                if !nodes[parent].requires_grad {
                    continue;
                }
                match &mut grads[parent] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        let leaf = nodes
            .iter()
            .map(|n| n.requires_grad && matches!(n.op, Op::Leaf))
            .collect();
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, leaf, shapes })
    }
}

fn backward_op<T: Float>(nodes: &[Node<T>], node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
    let val = |id: usize| -> &Tensor<T> { &nodes[id].value };
    let out = &*node.value;
    Ok(match &node.op {
        Op::Leaf => Vec::new(),
        Op::Binary { kind, a, b } => {
            let (ga, gb) = elementwise::binary_backward(*kind, g, val(*a), val(*b), out);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Unary { kind, x } => vec![(*x, elementwise::unary_backward(*kind, g, val(*x), out))],
        Op::Scale { x, factor } => vec![(*x, g.map(|v| v * *factor))],
        Op::AddScalar { x } => vec![(*x, g.clone())],
        Op::Linear { x, w, b } => {
            let (gx, gw, gb) = linalg::linear_backward(g, val(*x), val(*w), b.is_some());
            let mut v = vec![(*x, gx), (*w, gw)];
            if let (Some(b), Some(gb)) = (b, gb) {
                v.push((*b, gb));
            }
            v
        }
        Op::MatMul { a, b, trans_b } => {
            let (ga, gb) = linalg::matmul_backward(g, val(*a), val(*b), *trans_b);
            vec![(*a, ga), (*b, gb)]
        }
        Op::Conv2d { x, w, b, geom } => {
            let (gx, gw, gb) = conv::conv2d_backward(g, val(*x), val(*w), geom, b.is_some());
            let mut v = vec![(*x, gx), (*w, gw)];
            if let (Some(b), Some(gb)) = (b, gb) {
                v.push((*b, gb));
            }
            v
        }
        Op::Reduce { x, axis, kind, argmax } => {
            vec![(*x, reduce::reduce_backward(g, val(*x).shape(), *axis, *kind, argmax))]
        }
        Op::SumAll { x } => vec![(*x, Tensor::full(val(*x).shape().to_vec(), g.item()))],
        Op::Softmax { x: xi, axis } => vec![(*xi, reduce::softmax_backward(g, out, *axis))],
        Op::LayerNorm { x, rstd } => vec![(*x, reduce::layer_norm_backward(g, out, rstd))],
        Op::Concat { parts, axis } => {
            let shapes: Vec<&[usize]> = parts.iter().map(|&p| val(p).shape()).collect();
            parts
                .iter()
                .copied()
                .zip(shape::concat_backward(g, &shapes, *axis))
                .collect()
        }
        Op::Slice { x, axis, start } => vec![(*x, shape::slice_backward(g, val(*x).shape(), *axis, *start))],
        Op::Reshape { x } => vec![(*x, g.clone().reshape(val(*x).shape().to_vec())?)],
        Op::Permute { x, perm } => vec![(*x, shape::permute_backward(g, perm))],
        Op::Pad2d { x, pads, mode } => vec![(*x, shape::pad2d_backward(g, val(*x).shape(), *pads, *mode))],
        Op::Upsample2x { x, mode } => vec![(*x, shape::upsample2x_backward(g, val(*x).shape(), *mode))],
        Op::AdaptiveAvgPool { x } => vec![(*x, reduce::adaptive_avg_pool_backward(g, val(*x).shape()))],
        Op::SelectiveScan {
            x,
            delta,
            a,
            b,
            c,
            states,
        } => {
            let grads = scan::selective_scan_backward(g, val(*x), val(*delta), val(*a), val(*b), val(*c), states);
            vec![
                (*x, grads.x),
                (*delta, grads.delta),
                (*a, grads.a),
                (*b, grads.b),
                (*c, grads.c),
            ]
        }
    })
}

/// Gradients produced by one backward pass.
pub struct Gradients<T: Float = f32> {
    grads: Vec<Option<Tensor<T>>>,
    leaf: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a tracked leaf. Leaves the loss does not depend on get
    /// zeros; untracked or intermediate values get `None`.
    pub fn get(&self, v: Var<'_, T>) -> Option<Tensor<T>> {
        if !*self.leaf.get(v.id)? {
            return None;
        }
        Some(match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[v.id].clone()),
        })
    }

    /// Like [`Gradients::get`] but panics for untracked values.
    pub fn wrt(&self, v: Var<'_, T>) -> Tensor<T> {
        self.get(v).expect("gradient requested for an untracked value")
    }
}

impl<'g, T: Float> Var<'g, T> {
    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    /// Current value (shared, cheap to clone).
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Id of `other` after checking it lives on the same graph.
    pub(crate) fn same(&self, other: Var<'g, T>) -> Result<usize> {
        self.graph.check(other)
    }

    pub(crate) fn push(&self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var<'g, T> {
        self.graph.push(value, op, parents)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let loss = x.square().sum_all();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, -4.0]);
    }

    #[test]
    fn unreachable_param_gets_zero() {
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(vec![3]));
        let p = g.param(Tensor::ones(vec![2, 2]));
        let loss = x.sum_all();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(p), Tensor::zeros(vec![2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(vec![3]));
        let y = x.square();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarLoss(_))));
    }

    #[test]
    fn graph_is_consumed_once() {
        let g = Graph::<f32>::new();
        let x = g.param(Tensor::ones(vec![3]));
        let loss = x.sum_all();
        g.backward(loss).unwrap();
        assert_eq!(g.backward(loss).err(), Some(TensorError::GraphConsumed));
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx (x*x + x) = 2x + 1
        let g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![1], vec![3.0]).unwrap());
        let y = x.mul(x).unwrap().add(x).unwrap().sum_all();
        assert_eq!(g.backward(y).unwrap().wrt(x).data(), &[7.0]);
    }

    #[test]
    fn constants_have_no_gradient() {
        let g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones(vec![2]));
        let x = g.param(Tensor::ones(vec![2]));
        let loss = x.mul(c).unwrap().sum_all();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(c).is_none());
        assert!(!c.requires_grad());
    }
}
