use crate::error::{Result, TensorError};
use crate::fault::{self, Fault};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(TensorError::shape(
            op,
            format!("{:?} vs {:?}", g.shape(a), g.shape(b)),
        ));
    }
    Ok(())
}

/// `[A]` against `[A, ...]`; returns the size of one leading slice.
fn leading_inner<T: Scalar>(g: &Graph<T>, op: &'static str, x: Var, v: Var) -> Result<usize> {
    let xs = g.shape(x);
    let vs = g.shape(v);
    if xs.is_empty() || vs.len() != 1 || vs[0] != xs[0] {
        return Err(TensorError::shape(
            op,
            format!("per-leading operand {vs:?} does not match {xs:?}"),
        ));
    }
    Ok(xs[1..].iter().product())
}

fn map<T: Scalar>(g: &Graph<T>, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
    let v = g.value(x);
    Tensor::new(v.shape().to_vec(), v.data().iter().map(|&a| f(a)).collect())
        .expect("same shape")
}

fn zip<T: Scalar>(g: &Graph<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let va = g.value(a);
    let vb = g.value(b);
    let data = va
        .data()
        .iter()
        .zip(vb.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(va.shape().to_vec(), data).expect("same shape")
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let k = T::lit(0.044715);
    let half = T::lit(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

impl<T: Scalar> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = zip(self, a, b, |x, y| x + y);
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = zip(self, a, b, |x, y| x - y);
        self.push(Op::Sub(a, b), out)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = zip(self, a, b, |x, y| x * y);
        self.push(Op::Mul(a, b), out)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::lit(factor);
        let out = map(self, x, |a| a * f);
        self.push(Op::Scale(x, f), out)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let out = map(self, x, |a| a + c);
        self.push(Op::AddScalar(x), out)
    }

    /// `x · s` for a single-element node `s`.
    pub fn mul_scalar_var(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::shape(
                "mul_scalar_var",
                format!("scalar operand has shape {:?}", self.shape(s)),
            ));
        }
        let k = self.value(s).data()[0];
        let out = map(self, x, |a| a * k);
        self.push(Op::MulScalarVar { x, s }, out)
    }

    /// Adds `b[i]` to every element of slice `x[i, ...]` (per-channel bias).
    pub fn add_leading(&mut self, x: Var, b: Var) -> Result<Var> {
        let inner = leading_inner(self, "add_leading", x, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(x).clone();
        for (chunk, &bias) in out.data_mut().chunks_mut(inner.max(1)).zip(bv) {
            chunk.iter_mut().for_each(|a| *a += bias);
        }
        self.push(Op::AddLeading { x, b }, out)
    }

    /// Scales slice `x[i, ...]` by `s[i]`.
    pub fn mul_leading(&mut self, x: Var, s: Var) -> Result<Var> {
        let inner = leading_inner(self, "mul_leading", x, s)?;
        let sv = self.value(s).data();
        let mut out = self.value(x).clone();
        for (chunk, &k) in out.data_mut().chunks_mut(inner.max(1)).zip(sv) {
            chunk.iter_mut().for_each(|a| *a *= k);
        }
        self.push(Op::MulLeading { x, s }, out)
    }

    /// `[1, ...]` -> `[times, ...]` by copying the single leading slice.
    pub fn repeat_leading(&mut self, x: Var, times: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.is_empty() || xs[0] != 1 || times == 0 {
            return Err(TensorError::shape(
                "repeat_leading",
                format!("expected [1, ...] and times > 0, got {xs:?} x {times}"),
            ));
        }
        let mut shape = xs.to_vec();
        shape[0] = times;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(src.len() * times);
        for _ in 0..times {
            data.extend_from_slice(src);
        }
        let out = Tensor::new(shape, data)?;
        self.push(Op::RepeatLeading { x }, out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = map(self, x, |a| T::one() / (T::one() + (-a).exp()));
        self.push(Op::Sigmoid(x), out)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = map(self, x, |a| a.tanh());
        self.push(Op::Tanh(x), out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = map(self, x, |a| a.max(T::zero()));
        self.push(Op::Relu(x), out)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = map(self, x, gelu);
        self.push(Op::Gelu(x), out)
    }
}

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    op: &Op<T>,
    out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    match *op {
        Op::Add(a, b) => {
            sink.with(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
            sink.with(b, |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
        }
        Op::Sub(a, b) => {
            sink.with(a, |ga| ga.iter_mut().zip(g).for_each(|(x, &d)| *x += d));
            sink.with(b, |gb| gb.iter_mut().zip(g).for_each(|(x, &d)| *x -= d));
        }
        Op::Mul(a, b) => {
            let (va, vb) = (graph.value(a).data(), graph.value(b).data());
            sink.with(a, |ga| {
                for ((x, &d), &y) in ga.iter_mut().zip(g).zip(vb) {
                    *x += d * y;
                }
            });
            sink.with(b, |gb| {
                for ((x, &d), &y) in gb.iter_mut().zip(g).zip(va) {
                    *x += d * y;
                }
            });
        }
        Op::Scale(x, f) => sink.with(x, |gx| gx.iter_mut().zip(g).for_each(|(a, &d)| *a += d * f)),
        Op::AddScalar(x) => sink.with(x, |gx| gx.iter_mut().zip(g).for_each(|(a, &d)| *a += d)),
        Op::MulScalarVar { x, s } => {
            let k = graph.value(s).data()[0];
            sink.with(x, |gx| gx.iter_mut().zip(g).for_each(|(a, &d)| *a += d * k));
            let xv = graph.value(x).data();
            sink.with(s, |gs| gs[0] += g.iter().zip(xv).map(|(&d, &a)| d * a).sum::<T>());
        }
        Op::AddLeading { x, b } => {
            sink.with(x, |gx| gx.iter_mut().zip(g).for_each(|(a, &d)| *a += d));
            let lead = graph.shape(b)[0];
            let inner = g.len() / lead.max(1);
            sink.with(b, |gb| {
                for (i, chunk) in g.chunks(inner.max(1)).enumerate() {
                    gb[i] += chunk.iter().copied().sum::<T>();
                }
            });
        }
        Op::MulLeading { x, s } => {
            let lead = graph.shape(s)[0];
            let inner = (g.len() / lead.max(1)).max(1);
            let sv = graph.value(s).data();
            let xv = graph.value(x).data();
            sink.with(x, |gx| {
                for ((gc, dc), &k) in gx.chunks_mut(inner).zip(g.chunks(inner)).zip(sv) {
                    gc.iter_mut().zip(dc).for_each(|(a, &d)| *a += d * k);
                }
            });
            sink.with(s, |gs| {
                for (i, (dc, xc)) in g.chunks(inner).zip(xv.chunks(inner)).enumerate() {
                    gs[i] += dc.iter().zip(xc).map(|(&d, &a)| d * a).sum::<T>();
                }
            });
        }
        Op::RepeatLeading { x, .. } => {
            let n = graph.value(x).numel();
            sink.with(x, |gx| {
                for chunk in g.chunks(n.max(1)) {
                    gx.iter_mut().zip(chunk).for_each(|(a, &d)| *a += d);
                }
            });
        }
        Op::Sigmoid(x) => {
            let flip = if fault::active(Fault::SigmoidBackwardSign) {
                -T::one()
            } else {
                T::one()
            };
            sink.with(x, |gx| {
                for ((a, &d), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *a += flip * d * y * (T::one() - y);
                }
            });
        }
        Op::Tanh(x) => sink.with(x, |gx| {
            for ((a, &d), &y) in gx.iter_mut().zip(g).zip(out.data()) {
                *a += d * (T::one() - y * y);
            }
        }),
        Op::Relu(x) => {
            let xv = graph.value(x).data();
            sink.with(x, |gx| {
                for ((a, &d), &v) in gx.iter_mut().zip(g).zip(xv) {
                    if v > T::zero() {
                        *a += d;
                    }
                }
            });
        }
        Op::Gelu(x) => {
            let xv = graph.value(x).data();
            sink.with(x, |gx| {
                for ((a, &d), &v) in gx.iter_mut().zip(g).zip(xv) {
                    *a += d * gelu_grad(v);
                }
            });
        }
        _ => unreachable!("not an elementwise op"),
    }
}
