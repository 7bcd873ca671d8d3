//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] records a DAG of operations. Every op pushes one node holding
//! its forward value plus a backward closure that maps the upstream gradient
//! to per-parent gradients. Gradients of parameter leaves are accumulated
//! into the owning [`ParamStore`](crate::nn::ParamStore) by [`Tape::backward`].
//!
//! The same ops serve training and inference: with gradients disabled the
//! tape skips backward closures, so encoder and decoder evaluate through the
//! exact same arithmetic path (which keeps them bit-identical).

mod conv;
mod ops;

pub use conv::{conv_out_dim, convt_out_dim, ConvSpec, ConvTSpec};
pub use ops::dims4;

use std::cell::RefCell;

use ndarray::{ArrayD, IxDyn};

/// Dynamic-dimensional f32 array, the working currency of the engine.
pub type Arr = ArrayD<f32>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct T(pub(crate) usize);

pub(crate) type BackFn = Box<dyn Fn(&Arr, &[Node]) -> Vec<(usize, Arr)>>;

pub(crate) struct Node {
    pub value: Arr,
    pub backward: Option<BackFn>,
    /// Set on leaves created from a parameter; `backward` routes grads there.
    pub param: Option<usize>,
}

/// Computation tape. One per training step or inference call.
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// Tape that records values only; backward closures are dropped.
    pub fn no_grad() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub(crate) fn push(&self, value: Arr, backward: Option<BackFn>, param: Option<usize>) -> T {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, backward: if self.grad_enabled { backward } else { None }, param });
        T(nodes.len() - 1)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&self, value: Arr) -> T {
        self.push(value, None, None)
    }

    pub fn scalar(&self, v: f32) -> T {
        self.constant(ArrayD::from_elem(IxDyn(&[1]), v))
    }

    /// Leaf tied to parameter `pid`; its gradient is accumulated on backward.
    pub fn leaf(&self, value: Arr, pid: usize) -> T {
        self.push(value, None, if self.grad_enabled { Some(pid) } else { None })
    }

    pub fn value(&self, t: T) -> Arr {
        self.nodes.borrow()[t.0].value.clone()
    }

    pub fn shape(&self, t: T) -> Vec<usize> {
        self.nodes.borrow()[t.0].value.shape().to_vec()
    }

    pub fn with_value<R>(&self, t: T, f: impl FnOnce(&Arr) -> R) -> R {
        f(&self.nodes.borrow()[t.0].value)
    }

    /// Reverse pass from `loss` (any shape; seeded with ones). Parameter
    /// gradients are delivered through `sink(param_index, grad)`.
    pub fn backward(&self, loss: T, sink: &mut dyn FnMut(usize, &Arr)) {
        let nodes = self.nodes.borrow();
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Arr>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Arr::ones(nodes[loss.0].value.raw_dim()));
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if let Some(pid) = node.param {
                sink(pid, &g);
            }
            if let Some(back) = &node.backward {
                for (parent, pg) in back(&g, &nodes) {
                    debug_assert_eq!(pg.shape(), nodes[parent].value.shape());
                    match &mut grads[parent] {
                        Some(acc) => *acc += &pg,
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}
