//! Shape arithmetic: broadcasting, strides and index decoding.
//!
//! Broadcasting follows the usual right-aligned convention: shapes are
//! aligned at their trailing dimension, missing leading dimensions are
//! treated as 1, and a dimension of size 1 stretches to match.

use crate::error::{Error, Result};

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for a contiguous tensor of the given shape.
pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Shape resulting from broadcasting `a` against `b`.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let ndim = a.len().max(b.len());
    let mut out = vec![0usize; ndim];
    for i in 0..ndim {
        let da = dim_from_right(a, ndim - 1 - i);
        let db = dim_from_right(b, ndim - 1 - i);
        if da != db && da != 1 && db != 1 {
            return Err(Error::shape(format!(
                "cannot broadcast {a:?} with {b:?} (dim {da} vs {db})"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], idx_from_right: usize) -> usize {
    if idx_from_right < shape.len() {
        shape[shape.len() - 1 - idx_from_right]
    } else {
        1
    }
}

/// Strides into `shape` viewed as broadcast to `out_shape`; broadcast
/// dimensions get stride 0 so a linear walk over the output maps straight
/// to source offsets.
pub fn broadcast_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let base = contiguous_strides(shape);
    let ndim = out_shape.len();
    let mut strides = vec![0usize; ndim];
    for i in 0..ndim {
        let from_right = ndim - 1 - i;
        if from_right < shape.len() {
            let d = shape.len() - 1 - from_right;
            strides[i] = if shape[d] == 1 { 0 } else { base[d] };
        }
    }
    strides
}

/// Walks every linear output index together with the source offset implied
/// by `strides` (as produced by [`broadcast_strides`]).
pub struct StridedIter<'a> {
    shape: &'a [usize],
    strides: &'a [usize],
    coords: Vec<usize>,
    offset: usize,
    remaining: usize,
}

impl<'a> StridedIter<'a> {
    pub fn new(shape: &'a [usize], strides: &'a [usize]) -> Self {
        StridedIter {
            shape,
            strides,
            coords: vec![0; shape.len()],
            offset: 0,
            remaining: numel(shape),
        }
    }
}

impl Iterator for StridedIter<'_> {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.remaining == 0 {
            return None;
        }
        let current = self.offset;
        self.remaining -= 1;
        // Advance odometer-style from the last dimension.
        for d in (0..self.shape.len()).rev() {
            self.coords[d] += 1;
            self.offset += self.strides[d];
            if self.coords[d] < self.shape[d] {
                break;
            }
            self.offset -= self.coords[d] * self.strides[d];
            self.coords[d] = 0;
        }
        Some(current)
    }
}

/// Reduce `grad` (shaped `grad_shape`) back to `target_shape` by summing
/// over the dimensions that were expanded by broadcasting.
pub fn reduce_to_shape<E: crate::tensor::Element>(
    grad: &[E],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Vec<E> {
    if grad_shape == target_shape {
        return grad.to_vec();
    }
    let mut out = vec![E::zero(); numel(target_shape)];
    let strides = broadcast_strides(target_shape, grad_shape);
    for (g, off) in grad.iter().zip(StridedIter::new(grad_shape, &strides)) {
        out[off] = out[off] + *g;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes_basic() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shapes(&[5], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shapes(&[2, 3], &[4]).is_err());
    }

    #[test]
    fn strided_iter_covers_broadcast() {
        // [2] broadcast over [3, 2]: offsets cycle 0,1,0,1,0,1
        let strides = broadcast_strides(&[2], &[3, 2]);
        let offs: Vec<usize> = StridedIter::new(&[3, 2], &strides).collect();
        assert_eq!(offs, vec![0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn reduce_sums_expanded_dims() {
        // grad over [2,2] reduced to [2] sums the leading dim
        let grad = [1.0f64, 2.0, 3.0, 4.0];
        let red = reduce_to_shape(&grad, &[2, 2], &[2]);
        assert_eq!(red, vec![4.0, 6.0]);
    }
}
