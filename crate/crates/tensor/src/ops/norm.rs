use crate::error::{Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-row mean and reciprocal standard deviation (biased variance).
fn row_stats<T: Scalar>(x: &[T], len: usize, eps: f64) -> Vec<(T, T)> {
    let n = T::lit(len as f64);
    x.chunks(len)
        .map(|row| {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            (mean, T::one() / (var + T::lit(eps)).sqrt())
        })
        .collect()
}

/// `dx` for one normalized row given `dy_hat = dy * gamma`.
fn row_backward<T: Scalar>(x: &[T], dyh: &[T], (mean, rstd): (T, T), dx: &mut [T]) {
    let n = T::lit(x.len() as f64);
    let mut s1 = T::zero();
    let mut s2 = T::zero();
    for (&v, &d) in x.iter().zip(dyh) {
        s1 += d;
        s2 += d * (v - mean) * rstd;
    }
    let (m1, m2) = (s1 / n, s2 / n);
    for ((o, &v), &d) in dx.iter_mut().zip(x).zip(dyh) {
        let xh = (v - mean) * rstd;
        *o += rstd * (d - m1 - xh * m2);
    }
}

fn check_affine<T: Scalar>(
    g: &Graph<T>,
    op: &'static str,
    gamma: Var,
    beta: Var,
    n: usize,
) -> Result<()> {
    if g.shape(gamma) != [n] || g.shape(beta) != [n] {
        return Err(TensorError::shape(
            op,
            format!(
                "gamma {:?} / beta {:?}, expected [{n}]",
                g.shape(gamma),
                g.shape(beta)
            ),
        ));
    }
    Ok(())
}

impl<T: Scalar> Graph<T> {
    /// Normalizes each row of `[N, D]` over `D`, then applies per-column affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let &[_, d] = self.shape(x) else {
            return Err(TensorError::shape("layer_norm", format!("expected [N, D], got {:?}", self.shape(x))));
        };
        check_affine(self, "layer_norm", gamma, beta, d)?;
        let xv = self.value(x).data();
        let stats = row_stats(xv, d, eps);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xv.len());
        for (row, &(mean, rstd)) in xv.chunks(d).zip(&stats) {
            for ((&v, &ga), &be) in row.iter().zip(gv).zip(bv) {
                out.push((v - mean) * rstd * ga + be);
            }
        }
        let out = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(Op::LayerNorm { x, gamma, beta, eps }, out)
    }

    /// Normalizes each channel of `[C, H, W]` over its positions, then applies
    /// per-channel affine. Batch-norm statistics for a batch of one map.
    pub fn channel_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(TensorError::shape("channel_norm", format!("expected [C, H, W], got {:?}", self.shape(x))));
        };
        check_affine(self, "channel_norm", gamma, beta, c)?;
        let hw = h * w;
        let xv = self.value(x).data();
        let stats = row_stats(xv, hw, eps);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xv.len());
        for (ch, row) in xv.chunks(hw).enumerate() {
            let (mean, rstd) = stats[ch];
            out.extend(row.iter().map(|&v| (v - mean) * rstd * gv[ch] + bv[ch]));
        }
        let out = Tensor::new(vec![c, h, w], out)?;
        self.push(Op::ChannelNorm { x, gamma, beta, eps }, out)
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
        Op::LayerNorm { x, gamma, beta, eps } => {
            let d = graph.shape(x)[1];
            let xv = graph.value(x).data();
            let gv = graph.value(gamma).data();
            let stats = row_stats(xv, d, eps);
            sink.with(gamma, |gg| {
                for ((row, dr), &(mean, rstd)) in xv.chunks(d).zip(g.chunks(d)).zip(&stats) {
                    for ((a, &v), &dy) in gg.iter_mut().zip(row).zip(dr) {
                        *a += dy * (v - mean) * rstd;
                    }
                }
            });
            sink.with(beta, |gb| {
                for dr in g.chunks(d) {
                    gb.iter_mut().zip(dr).for_each(|(a, &dy)| *a += dy);
                }
            });
            sink.with(x, |gx| {
                let mut dyh = vec![T::zero(); d];
                for (((row, dr), gxr), &st) in xv.chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).zip(&stats) {
                    dyh.iter_mut().zip(dr).zip(gv).for_each(|((o, &dy), &ga)| *o = dy * ga);
                    row_backward(row, &dyh, st, gxr);
                }
            });
        }
        Op::ChannelNorm { x, gamma, beta, eps } => {
            let hw = graph.shape(x)[1] * graph.shape(x)[2];
            let xv = graph.value(x).data();
            let gv = graph.value(gamma).data();
            let stats = row_stats(xv, hw, eps);
            sink.with(gamma, |gg| {
                for (ch, (row, dr)) in xv.chunks(hw).zip(g.chunks(hw)).enumerate() {
                    let (mean, rstd) = stats[ch];
                    gg[ch] += row.iter().zip(dr).map(|(&v, &dy)| dy * (v - mean) * rstd).sum::<T>();
                }
            });
            sink.with(beta, |gb| {
                for (ch, dr) in g.chunks(hw).enumerate() {
                    gb[ch] += dr.iter().copied().sum::<T>();
                }
            });
            sink.with(x, |gx| {
                let mut dyh = vec![T::zero(); hw];
                for (ch, ((row, dr), gxr)) in xv.chunks(hw).zip(g.chunks(hw)).zip(gx.chunks_mut(hw)).enumerate() {
                    dyh.iter_mut().zip(dr).for_each(|(o, &dy)| *o = dy * gv[ch]);
                    row_backward(row, &dyh, stats[ch], gxr);
                }
            });
        }
        _ => unreachable!("not a normalization"),
    }
}
