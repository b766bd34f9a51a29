use crate::error::{Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn chw<T: Scalar>(g: &Graph<T>, op: &'static str, x: Var) -> Result<(usize, usize)> {
    match g.shape(x) {
        &[c, h, w] => Ok((c, h * w)),
        s => Err(TensorError::shape(op, format!("expected [C, H, W], got {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(TensorError::invalid("mean", "empty input"));
        }
        let s = self.value(x).sum() / T::lit(n as f64);
        self.push(Op::Mean(x), Tensor::scalar(s))
    }

    /// `[C, H, W] -> [1, H, W]`, averaging over channels.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let (c, hw) = chw(self, "channel_mean", x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); hw];
        for ch in src.chunks(hw.max(1)) {
            out.iter_mut().zip(ch).for_each(|(a, &v)| *a += v);
        }
        let inv = T::one() / T::lit(c as f64);
        out.iter_mut().for_each(|a| *a *= inv);
        let (h, w) = (self.shape(x)[1], self.shape(x)[2]);
        self.push(Op::ChannelMean(x), Tensor::new(vec![1, h, w], out)?)
    }

    /// `[C, H, W] -> [C]`, averaging over positions.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (c, hw) = chw(self, "global_avg_pool", x)?;
        if hw == 0 {
            return Err(TensorError::invalid("global_avg_pool", "empty map"));
        }
        let inv = T::one() / T::lit(hw as f64);
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
        self.push(Op::GlobalAvgPool(x), Tensor::new(vec![c], out)?)
    }
}

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    op: &Op<T>,
    _out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    match *op {
        Op::Sum(x) => sink.with(x, |gx| gx.iter_mut().for_each(|a| *a += g[0])),
        Op::Mean(x) => {
            let d = g[0] / T::lit(graph.value(x).numel() as f64);
            sink.with(x, |gx| gx.iter_mut().for_each(|a| *a += d));
        }
        Op::ChannelMean(x) => {
            let c = graph.shape(x)[0];
            let hw = g.len();
            let inv = T::one() / T::lit(c as f64);
            sink.with(x, |gx| {
                for ch in gx.chunks_mut(hw.max(1)) {
                    ch.iter_mut().zip(g).for_each(|(a, &d)| *a += d * inv);
                }
            });
        }
        Op::GlobalAvgPool(x) => {
            let hw = graph.value(x).numel() / g.len().max(1);
            let inv = T::one() / T::lit(hw as f64);
            sink.with(x, |gx| {
                for (ch, &d) in gx.chunks_mut(hw.max(1)).zip(g) {
                    ch.iter_mut().for_each(|a| *a += d * inv);
                }
            });
        }
        _ => unreachable!("not a reduction"),
    }
}
