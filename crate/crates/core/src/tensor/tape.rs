//! The gradient tape: an append-only record of executed ops.
//!
//! Ops push one node each; node indices are handed out in execution order,
//! so walking the vector backwards visits consumers before producers. A
//! node's gradient is accumulated (summed) over all of its consumers before
//! the node itself is processed, always in the same fixed order. A tape is
//! confined to one thread; independent tapes may run concurrently.

use super::{numel, ParamId, ParamStore, Tensor, TensorError};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct TensorId(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UnaryKind {
    Neg,
    Exp,
    Sin,
    Sqrt,
    Abs,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
    Softplus,
    Clamp01,
}

pub(crate) enum Op {
    Leaf { param: Option<ParamId> },
    Unary { kind: UnaryKind, x: TensorId },
    Binary { kind: BinKind, a: TensorId, b: TensorId },
    Scale { x: TensorId, c: f32 },
    AddScalar { x: TensorId },
    Matmul { a: TensorId, b: TensorId },
    Bmm { a: TensorId, b: TensorId },
    Conv2d { x: TensorId, w: TensorId, bias: Option<TensorId>, stride: usize, pad: usize },
    UpsampleBilinear { x: TensorId, factor: usize },
    AvgPool2 { x: TensorId },
    PixelShuffle { x: TensorId, factor: usize },
    Softmax { x: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f32 },
    Concat { inputs: Vec<TensorId>, axis: usize },
    Slice { x: TensorId, axis: usize, start: usize, len: usize },
    Reshape { x: TensorId },
    Permute { x: TensorId, perm: Vec<usize> },
    SumAll { x: TensorId },
    MeanAll { x: TensorId },
    Custom { inputs: Vec<TensorId>, grad: Box<dyn CustomGrad> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Backward rule for an op defined outside the numeric core (tri-plane
/// sampling, ray compositing). The forward value is computed by the caller;
/// the tape stores this object and invokes it during the reverse sweep.
pub trait CustomGrad: Send + Sync {
    /// Returns one gradient per input (`None` where `want` is false).
    /// `want[i]` mirrors the input's `requires_grad`.
    fn backward(&self, ctx: &BackwardCtx<'_>, grad_out: &[f32], want: &[bool])
        -> Vec<Option<Vec<f32>>>;

    /// Name used in error messages.
    fn name(&self) -> &'static str;
}

pub struct BackwardCtx<'a> {
    pub inputs: Vec<&'a Tensor>,
    pub output: &'a Tensor,
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
    /// High-precision value for scalar outputs (reductions and scalar
    /// arithmetic); lets the finite-difference checker see the loss before
    /// f32 rounding.
    pub(crate) f64_scalar: Option<f64>,
}

#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by `TensorId`.
/// Only leaf gradients are retained; intermediate buffers are freed as the
/// sweep consumes them.
pub struct Gradients {
    pub(crate) slots: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&[f32]> {
        self.slots.get(id.0).and_then(|s| s.as_deref())
    }

    /// Leaf gradient, materialized as zeros when the leaf was unreachable
    /// from the loss.
    pub fn get_or_zeros(&self, tape: &Tape, id: TensorId) -> Vec<f32> {
        match self.get(id) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.nodes[id.0].value.numel()],
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        self.nodes[id.0].value.data()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Scalar value with f64 precision when the producing op provided it.
    pub fn scalar_f64(&self, id: TensorId) -> f64 {
        let n = &self.nodes[id.0];
        n.f64_scalar.unwrap_or(n.value.data()[0] as f64)
    }

    pub(crate) fn push(
        &mut self,
        value: Tensor,
        op: Op,
        requires_grad: bool,
        f64_scalar: Option<f64>,
    ) -> TensorId {
        self.nodes.push(Node { value, op, requires_grad, f64_scalar });
        TensorId(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; gradient participation follows the
    /// tensor's `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        let req = t.requires_grad;
        self.push(t.clone(), Op::Leaf { param: None }, req, None)
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&mut self, t: &Tensor) -> TensorId {
        let mut c = t.clone();
        c.requires_grad = false;
        self.push(c, Op::Leaf { param: None }, false, None)
    }

    /// Registers a parameter from the store; gradient flows when the entry
    /// is trainable.
    pub fn param(&mut self, store: &ParamStore, pid: ParamId) -> TensorId {
        let t = store.value(pid).clone();
        let req = store.trainable(pid);
        self.push(t, Op::Leaf { param: Some(pid) }, req, None)
    }

    /// Pushes an externally computed op with its backward rule.
    pub fn custom(
        &mut self,
        inputs: Vec<TensorId>,
        value: Tensor,
        grad: Box<dyn CustomGrad>,
    ) -> TensorId {
        let req = inputs.iter().any(|&i| self.requires_grad(i));
        self.push(value, Op::Custom { inputs, grad }, req, None)
    }

    /// Reverse sweep from a scalar loss. Every node's gradient is summed
    /// over its consumers in fixed reverse-execution order; leaves keep
    /// their gradients in the returned set, intermediates are freed.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients, TensorError> {
        let loss_node = &self.nodes[loss.0];
        if !loss_node.value.is_scalar() {
            return Err(TensorError::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut slots: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                slots[id] = None;
                continue;
            }
            let Some(gout) = slots[id].take() else { continue };
            let is_leaf = matches!(self.nodes[id].op, Op::Leaf { .. });
            if !is_leaf {
                super::ops::backward_node(self, id, &gout, &mut slots)?;
            }
            if is_leaf {
                slots[id] = Some(gout);
            }
        }
        Ok(Gradients { slots })
    }

    /// Adds this tape's parameter-leaf gradients into the store. Every
    /// trainable parameter registered on the tape is marked as having a
    /// gradient, with zero contribution if it was unreachable from the loss.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { param: Some(pid) } = node.op {
                if node.requires_grad {
                    match grads.get(TensorId(i)) {
                        Some(g) => store.accumulate_grad(pid, g),
                        None => store.mark_has_grad(pid),
                    }
                }
            }
        }
    }

    /// Convenience: backward then accumulate parameter gradients.
    pub fn backward_params(
        &self,
        loss: TensorId,
        store: &mut ParamStore,
    ) -> Result<Gradients, TensorError> {
        let grads = self.backward(loss)?;
        self.accumulate_param_grads(&grads, store);
        Ok(grads)
    }

    pub(crate) fn numel_of(&self, id: TensorId) -> usize {
        numel(self.nodes[id.0].value.shape())
    }
}
