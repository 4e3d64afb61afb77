//! Forward tensor primitives.
//!
//! Each primitive validates its preconditions, computes a fresh output
//! buffer, rejects non-finite results and records itself on the graph when
//! any input is tracked.

use std::sync::Arc;

use rayon::prelude::*;

use super::autograd::Op;
use super::shape::{
    broadcast_shapes, broadcast_strides, contiguous_strides, numel, StridedIter,
};
use super::{fresh_id, Element, Inner, Tensor};
use crate::error::{Error, Result};

/// GELU tanh approximation: `0.5 x (1 + tanh(√(2/π) (x + 0.044715 x³)))`.
pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    half * x * (E::one() + (c * (x + a * x * x * x)).tanh())
}

pub(crate) fn gelu_deriv_scalar<E: Element>(x: E) -> E {
    let c = E::from_f64(GELU_C);
    let a = E::from_f64(GELU_A);
    let half = E::from_f64(0.5);
    let three = E::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = E::one() - t * t;
    let d_inner = c * (E::one() + three * a * x * x);
    half * (E::one() + t) + half * x * sech2 * d_inner
}

impl<E: Element> Tensor<E> {
    fn binary(
        &self,
        other: &Tensor<E>,
        name: &'static str,
        f: impl Fn(E, E) -> E,
        op: Op<E>,
    ) -> Result<Tensor<E>> {
        let out_shape = broadcast_shapes(self.shape(), other.shape())?;
        let n = numel(&out_shape);
        let mut data = Vec::with_capacity(n);
        if self.shape() == other.shape() {
            data.extend(
                self.data()
                    .iter()
                    .zip(other.data())
                    .map(|(&a, &b)| f(a, b)),
            );
        } else {
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(other.shape(), &out_shape);
            let ia = StridedIter::new(&out_shape, &sa);
            let ib = StridedIter::new(&out_shape, &sb);
            let (da, db) = (self.data(), other.data());
            data.extend(ia.zip(ib).map(|(oa, ob)| f(da[oa], db[ob])));
        }
        Tensor::from_op(data, out_shape, op, name)
    }

    /// Elementwise sum, broadcasting.
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.clone(), other.clone()))
    }

    /// Elementwise difference, broadcasting.
    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.clone(), other.clone()))
    }

    /// Elementwise product, broadcasting.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.clone(), other.clone()))
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, c: E) -> Result<Tensor<E>> {
        let data = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), c), "scale")
    }

    /// Add a constant to every element.
    pub fn add_scalar(&self, c: E) -> Result<Tensor<E>> {
        let data = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar(self.clone()), "add_scalar")
    }

    pub fn neg(&self) -> Result<Tensor<E>> {
        self.scale(-E::one())
    }

    pub fn square(&self) -> Result<Tensor<E>> {
        self.mul(self)
    }

    pub fn gelu(&self) -> Result<Tensor<E>> {
        let data = self.data().iter().map(|&v| gelu_scalar(v)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Gelu(self.clone()), "gelu")
    }

    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]`,
    /// broadcasting the leading (batch) dimensions.
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        let data = matmul_raw(
            self.data(),
            self.shape(),
            other.data(),
            other.shape(),
        )?;
        let out_shape = matmul_out_shape(self.shape(), other.shape())?;
        Tensor::from_op(data, out_shape, Op::Matmul(self.clone(), other.clone()), "matmul")
    }

    /// Softmax along `axis`, computed with max-subtraction for stability.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        if axis >= self.shape().len() {
            return Err(Error::shape(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let data = softmax_raw(self.data(), self.shape(), axis);
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            Op::Softmax { x: self.clone(), axis },
            "softmax",
        )
    }

    /// Layer normalization over the trailing dimension, then `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Tensor<E>, bias: &Tensor<E>, eps: f64) -> Result<Tensor<E>> {
        let d = *self.shape().last().ok_or_else(|| Error::shape("layer_norm on 0-d"))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape(format!(
                "layer_norm gain/bias must have shape [{d}], got {:?}/{:?}",
                gain.shape(),
                bias.shape()
            )));
        }
        let x = self.data();
        let g = gain.data();
        let b = bias.data();
        let epse = E::from_f64(eps);
        let dinv = E::from_f64(1.0 / d as f64);
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let mean = row.iter().copied().sum::<E>() * dinv;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<E>()
                * dinv;
            let inv_std = E::one() / (var + epse).sqrt();
            for i in 0..d {
                out.push((row[i] - mean) * inv_std * g[i] + b[i]);
            }
        }
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                eps,
            },
            "layer_norm",
        )
    }

    /// Reinterpret the buffer with a new shape (same element count). Shares
    /// the underlying data.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<E>> {
        if numel(new_shape) != self.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                new_shape
            )));
        }
        let tracked = self.tracked();
        Ok(Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: new_shape.to_vec(),
                data: Arc::clone(&self.inner.data),
                op: tracked.then(|| Op::Reshape(self.clone())),
                requires_grad: tracked,
            }),
        })
    }

    /// Reorder dimensions; `perm` must be a permutation of `0..ndim`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let ndim = self.shape().len();
        let mut seen = vec![false; ndim];
        if perm.len() != ndim || perm.iter().any(|&p| p >= ndim || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape(format!(
                "invalid permutation {perm:?} for shape {:?}",
                self.shape()
            )));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let in_strides = contiguous_strides(self.shape());
        let permuted_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = self.data();
        let data: Vec<E> = StridedIter::new(&out_shape, &permuted_strides)
            .map(|off| src[off])
            .collect();
        Tensor::from_op(
            data,
            out_shape,
            Op::Permute { x: self.clone(), perm: perm.to_vec() },
            "permute",
        )
    }

    /// Swap the last two dimensions (matrix transpose of each batch slice).
    pub fn transpose_last(&self) -> Result<Tensor<E>> {
        let ndim = self.shape().len();
        if ndim < 2 {
            return Err(Error::shape("transpose_last needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..ndim).collect();
        perm.swap(ndim - 2, ndim - 1);
        self.permute(&perm)
    }

    /// Materialize this tensor broadcast to `target` shape.
    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor<E>> {
        let check = broadcast_shapes(self.shape(), target)?;
        if check != target {
            return Err(Error::shape(format!(
                "cannot broadcast {:?} to {:?}",
                self.shape(),
                target
            )));
        }
        let strides = broadcast_strides(self.shape(), target);
        let src = self.data();
        let data: Vec<E> = StridedIter::new(target, &strides).map(|off| src[off]).collect();
        Tensor::from_op(data, target.to_vec(), Op::BroadcastTo(self.clone()), "broadcast_to")
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(tensors: &[Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let ndim = first.shape().len();
        if axis >= ndim {
            return Err(Error::shape(format!("concat axis {axis} out of range")));
        }
        let mut axis_total = 0;
        for t in tensors {
            if t.shape().len() != ndim
                || t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(format!(
                    "concat shape mismatch: {:?} vs {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
            axis_total += t.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;

        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for t in tensors {
                let block = t.shape()[axis] * inner;
                let src = &t.data()[o * block..(o + 1) * block];
                data.extend_from_slice(src);
            }
        }
        Tensor::from_op(
            data,
            out_shape,
            Op::Concat { xs: tensors.to_vec(), axis },
            "concat",
        )
    }

    /// Gather rows along the first dimension.
    pub fn index_select(&self, indices: &[usize]) -> Result<Tensor<E>> {
        let dim0 = self.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= dim0) {
            return Err(Error::shape(format!(
                "index {bad} out of range for first dim {dim0}"
            )));
        }
        let row: usize = self.shape()[1..].iter().product();
        let mut out_shape = self.shape().to_vec();
        out_shape[0] = indices.len();
        let src = self.data();
        let mut data = Vec::with_capacity(indices.len() * row);
        for &i in indices {
            data.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        Tensor::from_op(
            data,
            out_shape,
            Op::IndexSelect { x: self.clone(), indices: indices.to_vec() },
            "index_select",
        )
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum_all(&self) -> Result<Tensor<E>> {
        let s = self.data().iter().copied().sum::<E>();
        Tensor::from_op(vec![s], vec![1], Op::SumAll(self.clone()), "sum_all")
    }

    /// Mean of all elements as a `[1]` tensor.
    pub fn mean_all(&self) -> Result<Tensor<E>> {
        self.sum_all()?.scale(E::from_f64(1.0 / self.numel() as f64))
    }
}

pub(crate) fn matmul_out_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!("matmul needs rank >= 2, got {a:?} x {b:?}")));
    }
    let (m, ka) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dimension mismatch: {a:?} x {b:?}"
        )));
    }
    let mut out = broadcast_shapes(&a[..a.len() - 2], &b[..b.len() - 2])?;
    out.push(m);
    out.push(n);
    Ok(out)
}

/// Raw batched matmul on flat buffers. Exposed to the backward pass, which
/// multiplies gradients by transposed inputs without recording new ops.
pub(crate) fn matmul_raw<E: Element>(
    a: &[E],
    a_shape: &[usize],
    b: &[E],
    b_shape: &[usize],
) -> Result<Vec<E>> {
    let out_shape = matmul_out_shape(a_shape, b_shape)?;
    let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
    let n = b_shape[b_shape.len() - 1];
    let batch_shape = &out_shape[..out_shape.len() - 2];
    let batch = numel(batch_shape);

    // Per-batch data offsets; broadcast batch dims contribute stride 0.
    let sa = broadcast_strides(&a_shape[..a_shape.len() - 2], batch_shape);
    let sb = broadcast_strides(&b_shape[..b_shape.len() - 2], batch_shape);
    let a_offs: Vec<usize> = StridedIter::new(batch_shape, &sa).map(|o| o * m * k).collect();
    let b_offs: Vec<usize> = StridedIter::new(batch_shape, &sb).map(|o| o * k * n).collect();

    let mut out = vec![E::zero(); batch * m * n];
    let run = |out_chunk: &mut [E], bi: usize| {
        let av = &a[a_offs[bi]..a_offs[bi] + m * k];
        let bv = &b[b_offs[bi]..b_offs[bi] + k * n];
        for i in 0..m {
            let arow = &av[i * k..(i + 1) * k];
            let crow = &mut out_chunk[i * n..(i + 1) * n];
            for (p, &aip) in arow.iter().enumerate() {
                let brow = &bv[p * n..(p + 1) * n];
                for (c, &bval) in crow.iter_mut().zip(brow.iter()) {
                    *c = *c + aip * bval;
                }
            }
        }
    };
    if crate::threads::get() > 1 && batch > 1 {
        out.par_chunks_mut(m * n)
            .enumerate()
            .for_each(|(bi, chunk)| run(chunk, bi));
    } else {
        for (bi, chunk) in out.chunks_mut(m * n).enumerate() {
            run(chunk, bi);
        }
    }
    Ok(out)
}

pub(crate) fn softmax_raw<E: Element>(x: &[E], shape: &[usize], axis: usize) -> Vec<E> {
    let axis_size = shape[axis];
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut out = vec![E::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| o * axis_size * inner + a * inner + i;
            let mut max = x[idx(0)];
            for a in 1..axis_size {
                max = max.maximum(x[idx(a)]);
            }
            let mut total = E::zero();
            for a in 0..axis_size {
                let e = (x[idx(a)] - max).exp();
                out[idx(a)] = e;
                total = total + e;
            }
            let inv = E::one() / total;
            for a in 0..axis_size {
                out[idx(a)] = out[idx(a)] * inv;
            }
        }
    }
    out
}

/// Transpose the last two dims of a flat batched buffer (backward helper).
pub(crate) fn transpose_last_raw<E: Element>(x: &[E], shape: &[usize]) -> (Vec<E>, Vec<usize>) {
    let ndim = shape.len();
    let (r, c) = (shape[ndim - 2], shape[ndim - 1]);
    let batch: usize = shape[..ndim - 2].iter().product();
    let mut out = vec![E::zero(); x.len()];
    for b in 0..batch {
        let src = &x[b * r * c..(b + 1) * r * c];
        let dst = &mut out[b * r * c..(b + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = src[i * c + j];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(ndim - 2, ndim - 1);
    (out, out_shape)
}
