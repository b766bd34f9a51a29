use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::graph::{GradSink, Graph, Op, Var};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Index value that makes [`Graph::gather`] emit zero (used for padding).
pub const ZERO_INDEX: u32 = u32::MAX;

/// Flat source indices of a general axis permutation of a tensor with `shape`.
pub fn permutation_index(shape: &[usize], axes: &[usize]) -> Vec<u32> {
    assert_eq!(shape.len(), axes.len(), "permutation rank");
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let numel: usize = shape.iter().product();
    let mut index = Vec::with_capacity(numel);
    let mut coord = vec![0usize; rank];
    for _ in 0..numel {
        let src: usize = coord
            .iter()
            .zip(axes)
            .map(|(&c, &a)| c * strides[a])
            .sum();
        index.push(src as u32);
        for d in (0..rank).rev() {
            coord[d] += 1;
            if coord[d] < out_shape[d] {
                break;
            }
            coord[d] = 0;
        }
    }
    index
}

impl<T: Scalar> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(Op::Reshape(x), out)
    }

    /// `out[i] = x[index[i]]`, or zero where `index[i] == ZERO_INDEX`.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != index.len() {
            return Err(TensorError::shape(
                "gather",
                format!("{} indices for output shape {shape:?}", index.len()),
            ));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(numel);
        for &i in index.iter() {
            if i == ZERO_INDEX {
                data.push(T::zero());
            } else {
                let v = src.get(i as usize).ok_or_else(|| {
                    TensorError::invalid("gather", format!("index {i} out of {}", src.len()))
                })?;
                data.push(*v);
            }
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(Op::Gather { x, index }, out)
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::invalid(
                "permute",
                format!("axes {axes:?} for shape {shape:?}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let index = permutation_index(&shape, axes);
        self.gather(x, index.into(), &out_shape)
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * shape[axis] + a) * inner;
                index.extend((base..base + inner).map(|i| i as u32));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, index.into(), &out_shape)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid(
                "concat",
                format!("axis {axis} for rank {}", base.len()),
            ));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::shape(
                    "concat",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            out,
        )
    }

    /// Splits along `axis` into pieces of the given extents (inverse of concat).
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = self.shape(x).get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != extent {
            return Err(TensorError::shape(
                "split",
                format!("sizes {sizes:?} do not sum to extent {extent}"),
            ));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }
}

pub(crate) fn backward<T: Scalar>(
    graph: &Graph<T>,
    op: &Op<T>,
    _out: &Tensor<T>,
    g: &[T],
    sink: &mut GradSink<'_, T>,
) {
    match op {
        Op::Reshape(x) => sink.with(*x, |gx| gx.iter_mut().zip(g).for_each(|(a, &d)| *a += d)),
        Op::Gather { x, index } => sink.with(*x, |gx| {
            for (&i, &d) in index.iter().zip(g) {
                if i != ZERO_INDEX {
                    gx[i as usize] += d;
                }
            }
        }),
        Op::Concat { inputs, axis } => {
            let base = graph.shape(inputs[0]);
            let outer: usize = base[..*axis].iter().product();
            let inner: usize = base[*axis + 1..].iter().product();
            let total: usize = inputs.iter().map(|&v| graph.shape(v)[*axis]).sum();
            let mut offset = 0;
            for &v in inputs {
                let len = graph.shape(v)[*axis] * inner;
                sink.with(v, |gv| {
                    for o in 0..outer {
                        let src = &g[o * total * inner + offset..][..len];
                        gv[o * len..(o + 1) * len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(a, &d)| *a += d);
                    }
                });
                offset += len;
            }
        }
        _ => unreachable!("not a shape op"),
    }
}
