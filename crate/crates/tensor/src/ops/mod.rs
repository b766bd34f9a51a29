//! Differentiable primitives. Each submodule adds forward methods to
//! [`Graph`] and supplies the matching reverse rule.

mod conv;
mod elementwise;
mod linalg;
mod loss;
mod norm;
mod reduce;
mod resize;
mod shape;

pub use resize::bilinear_taps;
pub use shape::{permutation_index, ZERO_INDEX};

use crate::graph::{GradSink, Graph, Op};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    match op {
        Op::Leaf => {}
        Op::Add(..)
        | Op::Sub(..)
        | Op::Mul(..)
        | Op::Scale(..)
        | Op::AddScalar(..)
        | Op::MulScalarVar { .. }
        | Op::AddLeading { .. }
        | Op::MulLeading { .. }
        | Op::RepeatLeading { .. }
        | Op::Sigmoid(..)
        | Op::Tanh(..)
        | Op::Relu(..)
        | Op::Gelu(..) => elementwise::backward(graph, op, out, g, sink),
        Op::Matmul(..) | Op::Transpose(..) | Op::Softmax(..) => {
            linalg::backward(graph, op, out, g, sink)
        }
        Op::Reshape(..) | Op::Gather { .. } | Op::Concat { .. } => {
            shape::backward(graph, op, out, g, sink)
        }
        Op::Sum(..) | Op::Mean(..) | Op::ChannelMean(..) | Op::GlobalAvgPool(..) => {
            reduce::backward(graph, op, out, g, sink)
        }
        Op::Conv2d { .. } | Op::DepthwiseConv2d { .. } => conv::backward(graph, op, out, g, sink),
        Op::LayerNorm { .. } | Op::ChannelNorm { .. } => norm::backward(graph, op, out, g, sink),
        Op::Bilinear { .. } => resize::backward(graph, op, out, g, sink),
        Op::BceWithLogits { .. } => loss::backward(graph, op, out, g, sink),
        Op::Custom(custom) => {
            let grads = custom.backward(graph, out, g);
            for (&v, grad) in custom.inputs().iter().zip(grads) {
                if let Some(grad) = grad {
                    sink.add(v, grad);
                }
            }
        }
    }
}
