//! Tape of recorded operations and the reverse sweep over it.
//!
//! Every op appends one node whose inputs are strictly earlier nodes, so the
//! tape order is a topological order and the backward pass is a single reverse
//! scan that visits each node once.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::ops;
use crate::scalar::Scalar;
use crate::tensor::{first_non_finite, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable primitive.
///
/// The forward value is computed by the caller and handed to [`Graph::custom`];
/// the op only has to supply the vector-Jacobian product.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    fn inputs(&self) -> &[Var];

    /// One entry per input, in [`CustomOp::inputs`] order. `None` means no
    /// contribution (for example an input that does not require gradients).
    fn backward(
        &self,
        graph: &Graph<T>,
        output: &Tensor<T>,
        grad_out: &[T],
    ) -> Vec<Option<Vec<T>>>;
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MulScalarVar { x: Var, s: Var },
    AddLeading { x: Var, b: Var },
    MulLeading { x: Var, s: Var },
    RepeatLeading { x: Var },
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather { x: Var, index: Arc<[u32]> },
    Concat { inputs: Vec<Var>, axis: usize },
    Softmax(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    Sum(Var),
    Mean(Var),
    ChannelMean(Var),
    GlobalAvgPool(Var),
    Conv2d { input: Var, kernel: Var, stride: usize, padding: usize },
    DepthwiseConv2d { input: Var, kernel: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    ChannelNorm { x: Var, gamma: Var, beta: Var, eps: f64 },
    Bilinear { x: Var },
    BceWithLogits { logits: Var, target: Arc<[T]> },
    Custom(Box<dyn CustomOp<T>>),
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalarVar { .. } => "mul_scalar_var",
            Op::AddLeading { .. } => "add_leading",
            Op::MulLeading { .. } => "mul_leading",
            Op::RepeatLeading { .. } => "repeat_leading",
            Op::Matmul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Softmax(..) => "softmax",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ChannelMean(..) => "channel_mean",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseConv2d { .. } => "depthwise_conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ChannelNorm { .. } => "channel_norm",
            Op::Bilinear { .. } => "bilinear_resize",
            Op::BceWithLogits { .. } => "bce_with_logits",
            Op::Custom(op) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::Softmax(x)
            | Op::Sigmoid(x)
            | Op::Tanh(x)
            | Op::Relu(x)
            | Op::Gelu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::ChannelMean(x)
            | Op::GlobalAvgPool(x)
            | Op::RepeatLeading { x, .. }
            | Op::Gather { x, .. }
            | Op::Bilinear { x } => vec![*x],
            Op::BceWithLogits { logits, .. } => vec![*logits],
            Op::MulScalarVar { x, s } | Op::MulLeading { x, s } => vec![*x, *s],
            Op::AddLeading { x, b } => vec![*x, *b],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Conv2d { input, kernel, .. } | Op::DepthwiseConv2d { input, kernel } => {
                vec![*input, *kernel]
            }
            Op::LayerNorm { x, gamma, beta, .. } | Op::ChannelNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Custom(op) => op.inputs().to_vec(),
        }
    }
}

pub(crate) struct Node<T: Scalar> {
    pub(crate) value: Arc<Tensor<T>>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// A recorded computation. Build one per forward pass; call
/// [`Graph::backward`] on a scalar node to obtain gradients.
pub struct Graph<T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every recorded node in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.len()).map(Var)
    }

    /// Leaf node. Gradients are tracked only when `requires_grad` is set.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    pub fn leaf_shared(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Named trainable leaf. Repeated calls with the same name return the
    /// same node, so a parameter used in several places accumulates the
    /// gradient of every use.
    pub fn param(&mut self, name: &str, value: &Arc<Tensor<T>>) -> Var {
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        let v = self.leaf_shared(Arc::clone(value), true);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.param_index.get(name).copied()
    }

    /// Parameters registered so far, in first-use order.
    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Result<Var> {
        if let Some(index) = first_non_finite(value.data()) {
            return Err(TensorError::NonFinite {
                op: op.name(),
                index,
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Record a user-defined op whose forward value was computed externally.
    pub fn custom(&mut self, value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        if let Some(&bad) = op.inputs().iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(TensorError::invalid(
                op.name(),
                format!("input {bad:?} is not in this graph"),
            ));
        }
        self.push(Op::Custom(op), value)
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            if !matches!(node.op, Op::Leaf) {
                let mut sink = GradSink {
                    grads: &mut grads[..i],
                    nodes: &self.nodes[..i],
                };
                ops::backward(self, &node.op, &node.value, &g, &mut sink);
            }
            grads[i] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(index) = first_non_finite(g) {
                    return Err(TensorError::NonFinite {
                        op: self.nodes[i].op.name(),
                        index,
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Accumulates gradients into earlier nodes during the reverse sweep.
pub(crate) struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<Vec<T>>],
    nodes: &'a [Node<T>],
}

impl<T: Scalar> GradSink<'_, T> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Run `f` on the (zero-initialised on first use) gradient buffer of `v`.
    pub(crate) fn with(&mut self, v: Var, f: impl FnOnce(&mut [T])) {
        if !self.wants(v) {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let buf = self.grads[v.0].get_or_insert_with(|| vec![T::zero(); n]);
        f(buf);
    }

    pub(crate) fn add(&mut self, v: Var, g: Vec<T>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(g),
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v` shaped like its value; zeros when nothing reached it.
    pub fn tensor(&self, graph: &Graph<T>, v: Var) -> Tensor<T> {
        let shape = graph.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// `(name, gradient)` for every registered parameter.
    pub fn params(&self, graph: &Graph<T>) -> Vec<(String, Tensor<T>)> {
        graph
            .params()
            .iter()
            .map(|(name, v)| (name.clone(), self.tensor(graph, *v)))
            .collect()
    }
}
