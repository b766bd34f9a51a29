use crate::error::{Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Input offsets touched by output index `o` along one axis for tap `t`.
    #[inline]
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + t) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }
}

fn output_extent(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k).map(|r| r / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], geo: &Geometry) -> Vec<T> {
    let n = geo.ho * geo.wo;
    let mut cols = vec![T::zero(); geo.c * geo.k * geo.k * n];
    for c in 0..geo.c {
        let plane = &x[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = ((c * geo.k + ky) * geo.k + kx) * n;
                for oy in 0..geo.ho {
                    let Some(iy) = geo.src(oy, ky, geo.h) else {
                        continue;
                    };
                    let dst = &mut cols[row + oy * geo.wo..row + (oy + 1) * geo.wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        if let Some(ix) = geo.src(ox, kx, geo.w) {
                            *d = plane[iy * geo.w + ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], geo: &Geometry, gx: &mut [T]) {
    let n = geo.ho * geo.wo;
    for c in 0..geo.c {
        let plane = &mut gx[c * geo.h * geo.w..(c + 1) * geo.h * geo.w];
        for ky in 0..geo.k {
            for kx in 0..geo.k {
                let row = ((c * geo.k + ky) * geo.k + kx) * n;
                for oy in 0..geo.ho {
                    let Some(iy) = geo.src(oy, ky, geo.h) else {
                        continue;
                    };
                    let src = &cols[row + oy * geo.wo..row + (oy + 1) * geo.wo];
                    for (ox, &v) in src.iter().enumerate() {
                        if let Some(ix) = geo.src(ox, kx, geo.w) {
                            plane[iy * geo.w + ix] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv_geometry<T: Scalar>(
    g: &Graph<T>,
    input: Var,
    kernel: Var,
    stride: usize,
    padding: usize,
) -> Result<(Geometry, usize)> {
    let &[c, h, w] = g.shape(input) else {
        return Err(TensorError::shape(
            "conv2d",
            format!("input must be [C, H, W], got {:?}", g.shape(input)),
        ));
    };
    let &[co, ci, kh, kw] = g.shape(kernel) else {
        return Err(TensorError::shape(
            "conv2d",
            format!("kernel must be [C_out, C_in, k, k], got {:?}", g.shape(kernel)),
        ));
    };
    if ci != c {
        return Err(TensorError::shape(
            "conv2d",
            format!("input has {c} channels, kernel expects {ci}"),
        ));
    }
    if kh != kw {
        return Err(TensorError::invalid("conv2d", format!("non-square kernel {kh}x{kw}")));
    }
    if kh % 2 == 0 {
        return Err(TensorError::invalid("conv2d", format!("even kernel size {kh}")));
    }
    if stride == 0 {
        return Err(TensorError::invalid("conv2d", "stride must be >= 1"));
    }
    let (Some(ho), Some(wo)) = (
        output_extent(h, kh, stride, padding),
        output_extent(w, kw, stride, padding),
    ) else {
        return Err(TensorError::invalid(
            "conv2d",
            format!("kernel {kh} larger than padded input {h}x{w} (pad {padding})"),
        ));
    };
    Ok((
        Geometry {
            c,
            h,
            w,
            k: kh,
            stride,
            pad: padding,
            ho,
            wo,
        },
        co,
    ))
}

impl<T: Scalar> Graph<T> {
    /// 2-D cross-correlation with zero padding, no bias.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (geo, co) = conv_geometry(self, input, kernel, stride, padding)?;
        let n = geo.ho * geo.wo;
        let kk = geo.c * geo.k * geo.k;
        let x = self.value(input).data();
        let owned;
        let cols: &[T] = if geo.is_pointwise() {
            x
        } else {
            owned = im2col(x, &geo);
            &owned
        };
        let mut out = vec![T::zero(); co * n];
        T::gemm(
            co,
            kk,
            n,
            self.value(kernel).data(),
            (kk, 1),
            cols,
            (n, 1),
            T::zero(),
            &mut out,
        );
        let out = Tensor::new(vec![co, geo.ho, geo.wo], out)?;
        self.push(
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            out,
        )
    }

    /// Per-channel convolution, kernel `[C, 1, k, k]`, stride 1, same padding.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var) -> Result<Var> {
        let &[c, h, w] = self.shape(input) else {
            return Err(TensorError::shape("depthwise_conv2d", "input must be [C, H, W]"));
        };
        let &[kc, one, k, k2] = self.shape(kernel) else {
            return Err(TensorError::shape("depthwise_conv2d", "kernel must be [C, 1, k, k]"));
        };
        if kc != c || one != 1 || k != k2 {
            return Err(TensorError::shape(
                "depthwise_conv2d",
                format!("kernel {:?} for {c} channels", self.shape(kernel)),
            ));
        }
        if k % 2 == 0 {
            return Err(TensorError::invalid("depthwise_conv2d", format!("even kernel size {k}")));
        }
        let geo = Geometry {
            c,
            h,
            w,
            k,
            stride: 1,
            pad: (k - 1) / 2,
            ho: h,
            wo: w,
        };
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let mut out = vec![T::zero(); c * h * w];
        for ch in 0..c {
            let plane = &x[ch * h * w..(ch + 1) * h * w];
            let dst = &mut out[ch * h * w..(ch + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wt[(ch * k + ky) * k + kx];
                    for oy in 0..h {
                        let Some(iy) = geo.src(oy, ky, h) else { continue };
                        for ox in 0..w {
                            if let Some(ix) = geo.src(ox, kx, w) {
                                dst[oy * w + ox] += wv * plane[iy * w + ix];
                            }
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![c, h, w], out)?;
        self.push(Op::DepthwiseConv2d { input, kernel }, out)
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
        Op::Conv2d {
            input,
            kernel,
            stride,
            padding,
        } => {
            let (geo, co) =
                conv_geometry(graph, input, kernel, stride, padding).expect("validated in forward");
            let n = geo.ho * geo.wo;
            let kk = geo.c * geo.k * geo.k;
            let x = graph.value(input).data();
            let wt = graph.value(kernel).data();
            if sink.wants(kernel) {
                let owned;
                let cols: &[T] = if geo.is_pointwise() {
                    x
                } else {
                    owned = im2col(x, &geo);
                    &owned
                };
                // dW = G colsᵀ : [co, n] x [n, kk]
                sink.with(kernel, |gw| T::gemm(co, n, kk, g, (n, 1), cols, (1, n), T::one(), gw));
            }
            if sink.wants(input) {
                if geo.is_pointwise() {
                    sink.with(input, |gx| T::gemm(kk, co, n, wt, (1, kk), g, (n, 1), T::one(), gx));
                } else {
                    let mut dcols = vec![T::zero(); kk * n];
                    T::gemm(kk, co, n, wt, (1, kk), g, (n, 1), T::zero(), &mut dcols);
                    sink.with(input, |gx| col2im_add(&dcols, &geo, gx));
                }
            }
        }
        Op::DepthwiseConv2d { input, kernel } => {
            let (c, h, w) = (graph.shape(input)[0], graph.shape(input)[1], graph.shape(input)[2]);
            let k = graph.shape(kernel)[2];
            let geo = Geometry {
                c,
                h,
                w,
                k,
                stride: 1,
                pad: (k - 1) / 2,
                ho: h,
                wo: w,
            };
            let x = graph.value(input).data();
            let wt = graph.value(kernel).data();
            sink.with(kernel, |gw| {
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = T::zero();
                            for oy in 0..h {
                                let Some(iy) = geo.src(oy, ky, h) else { continue };
                                for ox in 0..w {
                                    if let Some(ix) = geo.src(ox, kx, w) {
                                        acc += g[(ch * h + oy) * w + ox] * x[(ch * h + iy) * w + ix];
                                    }
                                }
                            }
                            gw[(ch * k + ky) * k + kx] += acc;
                        }
                    }
                }
            });
            sink.with(input, |gx| {
                for ch in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wt[(ch * k + ky) * k + kx];
                            for oy in 0..h {
                                let Some(iy) = geo.src(oy, ky, h) else { continue };
                                for ox in 0..w {
                                    if let Some(ix) = geo.src(ox, kx, w) {
                                        gx[(ch * h + iy) * w + ix] += wv * g[(ch * h + oy) * w + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        _ => unreachable!("not a convolution"),
    }
}
