use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

impl<T: Scalar> Graph<T> {
    /// Mean binary cross-entropy between `sigmoid(logits)` and `target`,
    /// evaluated in the overflow-free form `max(x, 0) - x·y + ln(1 + e^{-|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor<T>) -> Result<Var> {
        if self.value(logits).numel() != target.numel() {
            return Err(TensorError::shape(
                "bce_with_logits",
                format!("logits {:?} vs target {:?}", self.shape(logits), target.shape()),
            ));
        }
        let n = target.numel();
        if n == 0 {
            return Err(TensorError::invalid("bce_with_logits", "empty target"));
        }
        let total: T = self
            .value(logits)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| x.max(T::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / T::lit(n as f64));
        let target: Arc<[T]> = target.data().into();
        self.push(Op::BceWithLogits { logits, target }, out)
    }
}

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    op: &Op<T>,
    _out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let Op::BceWithLogits { logits, target } = op else {
        unreachable!("not a loss")
    };
    let n = T::lit(target.len() as f64);
    let xv = graph.value(*logits).data();
    sink.with(*logits, |gx| {
        for ((a, &x), &y) in gx.iter_mut().zip(xv).zip(target.iter()) {
            let p = T::one() / (T::one() + (-x).exp());
            *a += g[0] * (p - y) / n;
        }
    });
}
