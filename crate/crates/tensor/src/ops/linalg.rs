use crate::error::{Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims2<T: Scalar>(g: &Graph<T>, op: &'static str, v: Var) -> Result<(usize, usize)> {
    match g.shape(v) {
        &[r, c] => Ok((r, c)),
        s => Err(TensorError::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = dims2(self, "matmul", a)?;
        let (k2, m) = dims2(self, "matmul", b)?;
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("[{n}, {k}] x [{k2}, {m}]"),
            ));
        }
        let mut out = vec![T::zero(); n * m];
        T::gemm(
            n,
            k,
            m,
            self.value(a).data(),
            (k, 1),
            self.value(b).data(),
            (m, 1),
            T::zero(),
            &mut out,
        );
        let out = Tensor::new(vec![n, m], out)?;
        self.push(Op::Matmul(a, b), out)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = dims2(self, "transpose", x)?;
        let src = self.value(x).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], out)?;
        self.push(Op::Transpose(x), out)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let last = *shape
            .last()
            .ok_or_else(|| TensorError::shape("softmax", "rank-0 input"))?;
        if last == 0 {
            return Err(TensorError::invalid("softmax", "empty softmax axis"));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(last) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let out = Tensor::new(shape, out)?;
        self.push(Op::Softmax(x), out)
    }

    /// Scaled dot-product attention: `softmax(Q Kᵀ / sqrt(d)) V`.
    ///
    /// `q: [N, d]`, `k: [M, d]`, `v: [M, c]` -> `[N, c]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (_, d) = dims2(self, "attention", q)?;
        let (m, dk) = dims2(self, "attention", k)?;
        let (mv, _) = dims2(self, "attention", v)?;
        if d == 0 {
            return Err(TensorError::invalid("attention", "zero head dimension"));
        }
        if m == 0 {
            return Err(TensorError::invalid("attention", "no keys (M = 0)"));
        }
        if dk != d || mv != m {
            return Err(TensorError::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v)
                ),
            ));
        }
        let kt = self.transpose(k)?;
        let logits = self.matmul(q, kt)?;
        let logits = self.scale(logits, 1.0 / (d as f64).sqrt())?;
        let weights = self.softmax(logits)?;
        self.matmul(weights, v)
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
        Op::Matmul(a, b) => {
            let (n, k) = (graph.shape(a)[0], graph.shape(a)[1]);
            let m = graph.shape(b)[1];
            let av = graph.value(a).data();
            let bv = graph.value(b).data();
            // dA = G Bᵀ : [n, m] x [m, k]
            sink.with(a, |ga| T::gemm(n, m, k, g, (m, 1), bv, (1, m), T::one(), ga));
            // dB = Aᵀ G : [k, n] x [n, m]
            sink.with(b, |gb| T::gemm(k, n, m, av, (1, k), g, (m, 1), T::one(), gb));
        }
        Op::Transpose(x) => {
            let (r, c) = (graph.shape(x)[0], graph.shape(x)[1]);
            sink.with(x, |gx| {
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] += g[j * r + i];
                    }
                }
            });
        }
        Op::Softmax(x) => {
            let last = *out.shape().last().expect("rank >= 1");
            sink.with(x, |gx| {
                for ((gr, dr), yr) in gx
                    .chunks_mut(last)
                    .zip(g.chunks(last))
                    .zip(out.data().chunks(last))
                {
                    let dot: T = dr.iter().zip(yr).map(|(&d, &y)| d * y).sum();
                    for ((a, &d), &y) in gr.iter_mut().zip(dr).zip(yr) {
                        *a += y * (d - dot);
                    }
                }
            });
        }
        _ => unreachable!("not a linear-algebra op"),
    }
}
