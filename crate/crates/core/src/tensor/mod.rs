//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tensor`] is a reference-counted node. Operations on tensors that
//! require gradients record a backward closure together with their parents;
//! [`Tensor::backward`] sweeps the recorded graph in reverse topological
//! order and accumulates gradients into every leaf (and into any interior
//! node marked with [`Tensor::retain_grad`]).

mod element;
pub mod gradcheck;
mod ops;
mod rng;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

pub use element::Element;
pub use ops::{activation, ew_binary, reduce, Activation, BinaryKind, ReduceKind};
pub use rng::{stable_hash, Rng, RngState};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("matmul: inner dimensions disagree ({lhs:?} x {rhs:?})")]
    InnerDimension { lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("buffer of length {got} does not fit shape {shape:?}")]
    BadLength { shape: Vec<usize>, got: usize },
    #[error("shape {0:?} has a zero dimension")]
    ZeroDimension(Vec<usize>),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("{op}: expected rank {expected}, got shape {got:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
    #[error("{op}: channel mismatch (input has {input}, weight expects {weight})")]
    ChannelMismatch {
        op: &'static str,
        input: usize,
        weight: usize,
    },
    #[error("{op}: non-positive output size along axis {axis}")]
    NonPositiveOutput { op: &'static str, axis: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("sequence must contain at least one step")]
    EmptySequence,
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

/// Recorded derivative rule of one operation.
pub(crate) trait Backward<T: Element> {
    fn parents(&self) -> &[Tensor<T>];

    /// Gradient contribution for each parent, in `parents()` order. `None`
    /// for parents that do not require gradients.
    fn backward(&self, output: &[T], grad: &[T]) -> Vec<Option<Vec<T>>>;
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

struct Node<T: Element> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    retain: Cell<bool>,
    op: Option<Box<dyn Backward<T>>>,
}

/// Dense n-dimensional array taking part in a differentiation graph.
/// Cloning is cheap and yields a handle to the same node.
pub struct Tensor<T: Element = f32>(Rc<Node<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &T::NAME)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Element> Tensor<T> {
    fn build(
        data: Vec<T>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Option<Box<dyn Backward<T>>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            retain: Cell::new(false),
            op,
        }))
    }

    /// Constant (no gradient) tensor.
    pub fn from_vec(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        if shape.contains(&0) {
            return Err(TensorError::ZeroDimension(shape.to_vec()));
        }
        if numel(shape) != data.len() {
            return Err(TensorError::BadLength {
                shape: shape.to_vec(),
                got: data.len(),
            });
        }
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Trainable leaf.
    pub fn parameter(data: Vec<T>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(t.into_leaf(true))
    }

    fn into_leaf(self, requires_grad: bool) -> Self {
        let data = self.0.data.borrow().clone();
        Self::build(data, self.0.shape.clone(), requires_grad, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::build(vec![value; numel(shape)], shape.to_vec(), false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(vec![value], vec![], false, None)
    }

    /// Output of an operation. The rule is recorded only when some parent
    /// participates in differentiation.
    pub(crate) fn from_op(data: Vec<T>, shape: Vec<usize>, op: impl Backward<T> + 'static) -> Self {
        let requires_grad = op.parents().iter().any(Tensor::requires_grad);
        let op: Option<Box<dyn Backward<T>>> = if requires_grad {
            Some(Box::new(op))
        } else {
            None
        };
        Self::build(data, shape, requires_grad, op)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn rank(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.0.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.0.data.borrow()
    }

    /// In-place access for optimizers and running statistics. Must not be
    /// used on tensors whose values a pending backward pass depends on.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> T {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Keep the gradient of an interior node after backward.
    pub fn retain_grad(&self) {
        self.0.retain.set(true);
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        self.clone().into_leaf(false)
    }

    /// Values converted to another element type, as a constant.
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        let data = self
            .0
            .data
            .borrow()
            .iter()
            .map(|v| U::of(v.to_f64().unwrap_or(f64::NAN)))
            .collect();
        Tensor::build(data, self.0.shape.clone(), false, None)
    }

    /// Back-propagate from this scalar. Gradients accumulate: calling this
    /// twice without zeroing adds the two contributions.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topological_order();
        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for node in order.iter().rev() {
            let Some(grad) = pending.remove(&node.id()) else {
                continue;
            };
            if let Some(op) = &node.0.op {
                let contributions = {
                    let out = node.0.data.borrow();
                    op.backward(&out, &grad)
                };
                for (parent, contribution) in op.parents().iter().zip(contributions) {
                    let Some(contribution) = contribution else {
                        continue;
                    };
                    if !parent.requires_grad() {
                        continue;
                    }
                    debug_assert_eq!(contribution.len(), parent.numel());
                    match pending.get_mut(&parent.id()) {
                        Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += *c),
                        None => {
                            pending.insert(parent.id(), contribution);
                        }
                    }
                }
            }
            if node.is_leaf() || node.0.retain.get() {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&grad).for_each(|(a, g)| *a += *g),
                    None => *slot = Some(grad),
                }
            }
        }
        Ok(())
    }

    /// Post-order over nodes that require gradients.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<(Tensor<T>, usize)> = vec![(self.clone(), 0)];
        seen.insert(self.id());
        while let Some((node, next)) = stack.pop() {
            let parents = node.0.op.as_ref().map(|op| op.parents()).unwrap_or(&[]);
            if next < parents.len() {
                let parent = parents[next].clone();
                stack.push((node, next + 1));
                if parent.requires_grad() && seen.insert(parent.id()) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }
        order
    }
}
