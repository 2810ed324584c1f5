//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array. Operations on tensors
//! that require gradients record their inputs in the output's node, forming a
//! DAG; [`backward`](Tensor::backward) walks that graph in reverse
//! topological order and returns a [`Gradients`] store. The graph lives only
//! as long as the tensors referencing it, so each training step's tape is
//! discarded when its loss goes out of scope.

mod backward;
mod kernels;
mod ops;
#[cfg(test)]
mod tests;

pub use backward::Gradients;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::dtype::Scalar;
use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn fmt_shape(shape: &[usize]) -> String {
    format!("{shape:?}")
}

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// A recorded primitive, holding the inputs (and any saved values) its
/// backward rule needs.
pub(crate) enum Op<E: Scalar> {
    Matmul { a: Tensor<E>, b: Tensor<E> },
    Add { a: Tensor<E>, b: Tensor<E> },
    Mul { a: Tensor<E>, b: Tensor<E> },
    Scale { x: Tensor<E>, c: E },
    Gelu { x: Tensor<E> },
    Relu { x: Tensor<E> },
    Reshape { x: Tensor<E> },
    Permute { x: Tensor<E>, dims: Vec<usize> },
    Narrow { x: Tensor<E>, axis: usize, start: usize },
    Concat { xs: Vec<Tensor<E>>, axis: usize },
    GatherRows { table: Tensor<E>, idx: Arc<Vec<usize>> },
    Softmax { x: Tensor<E>, axis: usize },
    LayerNorm { x: Tensor<E>, gamma: Tensor<E>, beta: Tensor<E>, mean: Arc<Vec<E>>, rstd: Arc<Vec<E>> },
    BatchNorm { x: Tensor<E>, gamma: Tensor<E>, beta: Tensor<E>, mean: Arc<Vec<E>>, rstd: Arc<Vec<E>> },
    SumAxis { x: Tensor<E>, axis: usize },
    MeanAxis { x: Tensor<E>, axis: usize },
    SumAll { x: Tensor<E> },
    MeanAll { x: Tensor<E> },
    CrossEntropy { logits: Tensor<E>, labels: Arc<Vec<usize>> },
    L2Normalize { x: Tensor<E>, norms: Arc<Vec<E>> },
}

impl<E: Scalar> Op<E> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Matmul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Gelu { .. } => "gelu",
            Op::Relu { .. } => "relu",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::BatchNorm { .. } => "batch_norm",
            Op::SumAxis { .. } => "sum_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::SumAll { .. } => "sum_all",
            Op::MeanAll { .. } => "mean_all",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::L2Normalize { .. } => "l2_normalize",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor<E>> {
        match self {
            Op::Matmul { a, b } | Op::Add { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Relu { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::Narrow { x, .. }
            | Op::Softmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::L2Normalize { x, .. } => vec![x],
            Op::Concat { xs, .. } => xs.iter().collect(),
            Op::GatherRows { table, .. } => vec![table],
            Op::LayerNorm { x, gamma, beta, .. } | Op::BatchNorm { x, gamma, beta, .. } => {
                vec![x, gamma, beta]
            }
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }
}

struct Inner<E: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    op: Option<Op<E>>,
}

/// Immutable dense tensor; cloning is cheap (shared storage).
#[derive(Clone)]
pub struct Tensor<E: Scalar>(Arc<Inner<E>>);

impl<E: Scalar> Tensor<E> {
    fn alloc(shape: Vec<usize>, data: Arc<Vec<E>>, requires_grad: bool, op: Option<Op<E>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            id: NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            op,
        }))
    }

    /// Constant (non-differentiable) tensor from raw data.
    pub fn from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {} wants {} elements, got {}", fmt_shape(shape), shape.iter().product::<usize>(), data.len()),
            ));
        }
        Ok(Self::alloc(shape.to_vec(), Arc::new(data), false, None))
    }

    /// Leaf variable participating in gradient computation.
    pub fn var_from_vec(data: Vec<E>, shape: &[usize]) -> Result<Self> {
        let t = Self::from_vec(data, shape)?;
        Ok(Self::alloc(t.0.shape.clone(), t.0.data.clone(), true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::alloc(shape.to_vec(), Arc::new(vec![E::zero(); shape.iter().product()]), false, None)
    }

    pub fn full(value: E, shape: &[usize]) -> Self {
        Self::alloc(shape.to_vec(), Arc::new(vec![value; shape.iter().product()]), false, None)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(E::one(), shape)
    }

    pub fn scalar(value: E) -> Self {
        Self::alloc(vec![], Arc::new(vec![value]), false, None)
    }

    pub(crate) fn from_op(data: Vec<E>, shape: Vec<usize>, op: Op<E>) -> Self {
        let requires_grad = op.inputs().iter().any(|t| t.requires_grad());
        let op = if requires_grad { Some(op) } else { None };
        Self::alloc(shape, Arc::new(data), requires_grad, op)
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
        self.0.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.0.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<E>> {
        self.0.data.clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub(crate) fn op(&self) -> Option<&Op<E>> {
        self.0.op.as_ref()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.name())
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> E {
        assert!(self.is_scalar(), "item() on non-scalar tensor of shape {}", fmt_shape(self.shape()));
        self.0.data[0]
    }

    /// View sharing storage, severed from the gradient graph.
    pub fn detach(&self) -> Self {
        Self::alloc(self.0.shape.clone(), self.0.data.clone(), false, None)
    }

    /// Same data promoted to a gradient-carrying leaf (used by parameters).
    pub fn requiring_grad(&self) -> Self {
        Self::alloc(self.0.shape.clone(), self.0.data.clone(), true, None)
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.0.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.0.data.iter().all(|v| v.is_finite())
    }
}

impl<E: Scalar> std::fmt::Debug for Tensor<E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor(id={}, shape={}, requires_grad={})", self.id(), fmt_shape(self.shape()), self.requires_grad())
    }
}

/// Walk the recorded graph in creation order and name the first operation
/// whose output contains a non-finite value. Used for abort diagnostics.
pub fn first_nonfinite_op<E: Scalar>(root: &Tensor<E>) -> Option<String> {
    let mut seen = std::collections::HashSet::new();
    let mut nodes: Vec<Tensor<E>> = Vec::new();
    let mut stack = vec![root.clone()];
    while let Some(t) = stack.pop() {
        if !seen.insert(t.id()) {
            continue;
        }
        if let Some(op) = t.op() {
            for input in op.inputs() {
                stack.push((*input).clone());
            }
        }
        nodes.push(t);
    }
    // Creation order == execution order (ids are monotone).
    nodes.sort_by_key(|t| t.id());
    nodes.iter().find(|t| !t.all_finite()).map(|t| match t.op_name() {
        Some(name) => name.to_string(),
        None => "input".to_string(),
    })
}
