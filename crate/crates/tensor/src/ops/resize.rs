use crate::error::{Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Source taps `(i0, i1, frac)` for each output index, half-pixel centres:
/// `src = (dst + 0.5) * in / out - 0.5`, clamped to `[0, in - 1]`.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (input - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<T: Scalar> Graph<T> {
    /// Bilinear resampling of `[C, H, W]` to `[C, out_h, out_w]`
    /// (half-pixel centres, no corner alignment).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let &[c, h, w] = self.shape(x) else {
            return Err(TensorError::shape("bilinear_resize", format!("expected [C, H, W], got {:?}", self.shape(x))));
        };
        if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
            return Err(TensorError::invalid(
                "bilinear_resize",
                format!("cannot resize {h}x{w} to {out_h}x{out_w}"),
            ));
        }
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                let fy = T::lit(fy);
                for &(x0, x1, fx) in &tx {
                    let fx = T::lit(fx);
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let out = Tensor::new(vec![c, out_h, out_w], out)?;
        self.push(Op::Bilinear { x }, out)
    }
}

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    let Op::Bilinear { x } = *op else {
        unreachable!("not a resize")
    };
    let (c, h, w) = (graph.shape(x)[0], graph.shape(x)[1], graph.shape(x)[2]);
    let (oh, ow) = (out.shape()[1], out.shape()[2]);
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    sink.with(x, |gx| {
        for ch in 0..c {
            let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
            let gp = &g[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::lit(fy);
                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::lit(fx);
                    let d = gp[oy * ow + ox];
                    plane[y0 * w + x0] += d * (T::one() - fy) * (T::one() - fx);
                    plane[y0 * w + x1] += d * (T::one() - fy) * fx;
                    plane[y1 * w + x0] += d * fy * (T::one() - fx);
                    plane[y1 * w + x1] += d * fy * fx;
                }
            }
        }
    });
}
