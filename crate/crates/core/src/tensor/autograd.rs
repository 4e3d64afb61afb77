//! Reverse-mode differentiation over the recorded graph.
//!
//! Tensor ids are assigned in creation order, so along every edge the input
//! id is smaller than the output id. Visiting reachable nodes in descending
//! id order is therefore an exact reverse topological order, and gradient
//! contributions accumulate additively across fan-out.

use std::collections::{HashMap, HashSet};

use super::ops::{gelu_deriv_scalar, matmul_raw, transpose_last_raw};
use super::shape::{broadcast_strides, contiguous_strides, reduce_to_shape, StridedIter};
use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Recorded primitive with the saved inputs needed for its backward rule.
pub(crate) enum Op<E: Element> {
    Add(Tensor<E>, Tensor<E>),
    Sub(Tensor<E>, Tensor<E>),
    Mul(Tensor<E>, Tensor<E>),
    Scale(Tensor<E>, E),
    AddScalar(Tensor<E>),
    Gelu(Tensor<E>),
    Matmul(Tensor<E>, Tensor<E>),
    Softmax { x: Tensor<E>, axis: usize },
    LayerNorm { x: Tensor<E>, gain: Tensor<E>, bias: Tensor<E>, eps: f64 },
    Reshape(Tensor<E>),
    Permute { x: Tensor<E>, perm: Vec<usize> },
    BroadcastTo(Tensor<E>),
    Concat { xs: Vec<Tensor<E>>, axis: usize },
    IndexSelect { x: Tensor<E>, indices: Vec<usize> },
    SumAll(Tensor<E>),
}

impl<E: Element> Op<E> {
    pub(crate) fn inputs(&self) -> Vec<&Tensor<E>> {
        match self {
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Matmul(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Gelu(x)
            | Op::Reshape(x)
            | Op::BroadcastTo(x)
            | Op::SumAll(x) => vec![x],
            Op::Softmax { x, .. } | Op::Permute { x, .. } | Op::IndexSelect { x, .. } => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Concat { xs, .. } => xs.iter().collect(),
        }
    }
}

/// Gradient store keyed by tensor id. `backward` fills it for every tracked
/// leaf reachable from the loss; repeated `backward_into` calls accumulate.
#[derive(Default)]
pub struct Gradients<E: Element> {
    map: HashMap<u64, Vec<E>>,
}

impl<E: Element> Gradients<E> {
    pub fn new() -> Self {
        Gradients { map: HashMap::new() }
    }

    pub fn get(&self, t: &Tensor<E>) -> Option<&[E]> {
        self.map.get(&t.id()).map(|v| v.as_slice())
    }

    pub fn get_id(&self, id: u64) -> Option<&[E]> {
        self.map.get(&id).map(|v| v.as_slice())
    }

    /// Reset all gradients (the buffers are dropped, not zeroed in place).
    pub fn zero(&mut self) {
        self.map.clear();
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    fn accumulate(&mut self, id: u64, g: Vec<E>) {
        match self.map.entry(id) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (a, b) in e.get_mut().iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(g);
            }
        }
    }
}

impl<E: Element> Tensor<E> {
    /// Run the backward pass from this scalar loss, returning gradients for
    /// every tracked leaf.
    pub fn backward(&self) -> Result<Gradients<E>> {
        let mut grads = Gradients::new();
        self.backward_into(&mut grads)?;
        Ok(grads)
    }

    /// As [`backward`](Self::backward) but accumulating into an existing
    /// store (gradients add across calls until `zero()` is invoked).
    pub fn backward_into(&self, grads: &mut Gradients<E>) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArg(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.tracked() {
            return Err(Error::InvalidArg(
                "loss is not connected to any tracked tensor (detached graph)".into(),
            ));
        }

        // Collect the reachable subgraph.
        let mut nodes: Vec<Tensor<E>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        seen.insert(self.id());
        while let Some(t) = stack.pop() {
            if let Some(op) = &t.inner.op {
                for input in op.inputs() {
                    if input.tracked() && seen.insert(input.id()) {
                        stack.push((*input).clone());
                    }
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.id().cmp(&a.id()));

        let mut local: HashMap<u64, Vec<E>> = HashMap::new();
        local.insert(self.id(), vec![E::one()]);

        for node in &nodes {
            let Some(grad) = local.remove(&node.id()) else {
                continue;
            };
            match &node.inner.op {
                None => {
                    // Tracked leaf: report the gradient.
                    grads.accumulate(node.id(), grad);
                }
                Some(op) => {
                    backprop_op(node, op, &grad, &mut local)?;
                }
            }
        }
        Ok(())
    }
}

fn push<E: Element>(local: &mut HashMap<u64, Vec<E>>, t: &Tensor<E>, g: Vec<E>) {
    if !t.tracked() {
        return;
    }
    match local.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(g) {
                *a = *a + b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

/// Gradient of `mul` w.r.t. one input: `g` elementwise times the *other*
/// input broadcast to the output shape, then reduced back.
fn mul_input_grad<E: Element>(
    grad: &[E],
    out_shape: &[usize],
    other: &Tensor<E>,
    target: &Tensor<E>,
) -> Vec<E> {
    let strides = broadcast_strides(other.shape(), out_shape);
    let od = other.data();
    let full: Vec<E> = grad
        .iter()
        .zip(StridedIter::new(out_shape, &strides))
        .map(|(&g, off)| g * od[off])
        .collect();
    reduce_to_shape(&full, out_shape, target.shape())
}

fn backprop_op<E: Element>(
    node: &Tensor<E>,
    op: &Op<E>,
    grad: &[E],
    local: &mut HashMap<u64, Vec<E>>,
) -> Result<()> {
    let out_shape = node.shape();
    match op {
        Op::Add(a, b) => {
            push(local, a, reduce_to_shape(grad, out_shape, a.shape()));
            push(local, b, reduce_to_shape(grad, out_shape, b.shape()));
        }
        Op::Sub(a, b) => {
            push(local, a, reduce_to_shape(grad, out_shape, a.shape()));
            let neg: Vec<E> = grad.iter().map(|&g| -g).collect();
            push(local, b, reduce_to_shape(&neg, out_shape, b.shape()));
        }
        Op::Mul(a, b) => {
            if a.tracked() {
                push(local, a, mul_input_grad(grad, out_shape, b, a));
            }
            if b.tracked() {
                push(local, b, mul_input_grad(grad, out_shape, a, b));
            }
        }
        Op::Scale(x, c) => {
            push(local, x, grad.iter().map(|&g| g * *c).collect());
        }
        Op::AddScalar(x) => {
            push(local, x, grad.to_vec());
        }
        Op::Gelu(x) => {
            let dg: Vec<E> = grad
                .iter()
                .zip(x.data())
                .map(|(&g, &v)| g * gelu_deriv_scalar(v))
                .collect();
            push(local, x, dg);
        }
        Op::Matmul(a, b) => {
            if a.tracked() {
                let (bt, bt_shape) = transpose_last_raw(b.data(), b.shape());
                let ga = matmul_raw(grad, out_shape, &bt, &bt_shape)?;
                let mut ga_shape = out_shape.to_vec();
                let nd = ga_shape.len();
                ga_shape[nd - 1] = a.shape()[a.shape().len() - 1];
                push(local, a, reduce_to_shape(&ga, &ga_shape, a.shape()));
            }
            if b.tracked() {
                let (at, at_shape) = transpose_last_raw(a.data(), a.shape());
                let gb = matmul_raw(&at, &at_shape, grad, out_shape)?;
                // a^T g has shape broadcast(batch_a, batch_out) + [k, n].
                let gb_shape = {
                    let mut s = super::shape::broadcast_shapes(
                        &at_shape[..at_shape.len() - 2],
                        &out_shape[..out_shape.len() - 2],
                    )?;
                    s.push(b.shape()[b.shape().len() - 2]);
                    s.push(out_shape[out_shape.len() - 1]);
                    s
                };
                push(local, b, reduce_to_shape(&gb, &gb_shape, b.shape()));
            }
        }
        Op::Softmax { x, axis } => {
            // dx_i = s_i (g_i - sum_j g_j s_j) along the softmax axis.
            let s = node.data();
            let axis_size = out_shape[*axis];
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let mut dg = vec![E::zero(); s.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |a: usize| o * axis_size * inner + a * inner + i;
                    let mut dot = E::zero();
                    for a in 0..axis_size {
                        dot = dot + grad[idx(a)] * s[idx(a)];
                    }
                    for a in 0..axis_size {
                        dg[idx(a)] = s[idx(a)] * (grad[idx(a)] - dot);
                    }
                }
            }
            push(local, x, dg);
        }
        Op::LayerNorm { x, gain, bias, eps } => {
            let d = *x.shape().last().unwrap();
            let xd = x.data();
            let gd = gain.data();
            let epse = E::from_f64(*eps);
            let dinv = E::from_f64(1.0 / d as f64);
            let mut dx = vec![E::zero(); xd.len()];
            let mut dgain = vec![E::zero(); d];
            let mut dbias = vec![E::zero(); d];
            for (row_idx, row) in xd.chunks_exact(d).enumerate() {
                let start = row_idx * d;
                let g_row = &grad[start..start + d];
                let mean = row.iter().copied().sum::<E>() * dinv;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() * dinv;
                let inv_std = E::one() / (var + epse).sqrt();
                let xhat: Vec<E> = row.iter().map(|&v| (v - mean) * inv_std).collect();

                let mut dxhat = vec![E::zero(); d];
                let mut dxhat_sum = E::zero();
                let mut dxhat_xhat = E::zero();
                for j in 0..d {
                    dgain[j] = dgain[j] + g_row[j] * xhat[j];
                    dbias[j] = dbias[j] + g_row[j];
                    dxhat[j] = g_row[j] * gd[j];
                    dxhat_sum = dxhat_sum + dxhat[j];
                    dxhat_xhat = dxhat_xhat + dxhat[j] * xhat[j];
                }
                let de = E::from_f64(d as f64);
                for j in 0..d {
                    dx[start + j] =
                        inv_std * dinv * (de * dxhat[j] - dxhat_sum - xhat[j] * dxhat_xhat);
                }
            }
            push(local, x, dx);
            push(local, gain, dgain);
            push(local, bias, dbias);
        }
        Op::Reshape(x) => {
            push(local, x, grad.to_vec());
        }
        Op::Permute { x, perm } => {
            // Scatter grad back through the inverse permutation.
            let in_strides = contiguous_strides(x.shape());
            let permuted: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let mut dx = vec![E::zero(); x.numel()];
            for (g, off) in grad.iter().zip(StridedIter::new(out_shape, &permuted)) {
                dx[off] = dx[off] + *g;
            }
            push(local, x, dx);
        }
        Op::BroadcastTo(x) => {
            push(local, x, reduce_to_shape(grad, out_shape, x.shape()));
        }
        Op::Concat { xs, axis } => {
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total_block = out_shape[*axis] * inner;
            let mut offset_in_axis = 0;
            for t in xs {
                let block = t.shape()[*axis] * inner;
                let mut dt = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    let start = o * total_block + offset_in_axis * inner;
                    dt.extend_from_slice(&grad[start..start + block]);
                }
                offset_in_axis += t.shape()[*axis];
                push(local, t, dt);
            }
        }
        Op::IndexSelect { x, indices } => {
            let row: usize = x.shape()[1..].iter().product();
            let mut dx = vec![E::zero(); x.numel()];
            for (slot, &i) in indices.iter().enumerate() {
                let src = &grad[slot * row..(slot + 1) * row];
                let dst = &mut dx[i * row..(i + 1) * row];
                for (a, b) in dst.iter_mut().zip(src) {
                    *a = *a + *b;
                }
            }
            push(local, x, dx);
        }
        Op::SumAll(x) => {
            push(local, x, vec![grad[0]; x.numel()]);
        }
    }
    Ok(())
}
