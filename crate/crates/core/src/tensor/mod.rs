//! Dense f64 tensors with a build-then-consume reverse-mode tape.
//!
//! `Tensor` is a plain value (shape + row-major data). Differentiable
//! computation happens on a [`Tape`]: leaves are registered, ops are recorded
//! in execution order, and `backward` replays them in exact reverse order,
//! accumulating adjoints into the leaves.

mod gradcheck;
mod kernels;
mod tape;

pub use gradcheck::{grad_check, grad_check_multi, GradCheckReport};
pub use tape::{ReduceKind, Tape, Var};

use crate::error::{Error, Result};

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Scalar extraction; the tensor must hold exactly one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

/// Right-aligned (numpy-style) broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = dim_or_one(a, rank, i);
        let db = dim_or_one(b, rank, i);
        if da != db && da != 1 && db != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn dim_or_one(shape: &[usize], rank: usize, i: usize) -> usize {
    let offset = rank - shape.len();
    if i < offset {
        1
    } else {
        shape[i - offset]
    }
}

/// Row-major strides for `shape`, with stride 0 on axes broadcast from
/// extent 1 relative to `out_rank`-sized coordinates.
pub(crate) fn broadcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0usize; out_rank];
    let offset = out_rank - shape.len();
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Apply `f` elementwise over broadcast inputs, producing data of `out_shape`.
pub(crate) fn zip_broadcast(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    let rank = out_shape.len();
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(a_shape, rank);
    let sb = broadcast_strides(b_shape, rank);
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    for _ in 0..n {
        out.push(f(a[ia], b[ib]));
        // advance odometer
        for d in (0..rank).rev() {
            coords[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ia -= sa[d] * out_shape[d];
            ib -= sb[d] * out_shape[d];
        }
    }
    out
}

/// Sum a gradient of `grad_shape` back down to `target_shape` (reversing a
/// broadcast). Accumulates into `acc`, which must have the target length.
pub(crate) fn reduce_grad_into(
    grad: &[f64],
    grad_shape: &[usize],
    target_shape: &[usize],
    acc: &mut [f64],
) {
    if grad_shape == target_shape {
        for (a, g) in acc.iter_mut().zip(grad) {
            *a += *g;
        }
        return;
    }
    let rank = grad_shape.len();
    let st = broadcast_strides(target_shape, rank);
    let mut coords = vec![0usize; rank];
    let mut it = 0usize;
    for &g in grad {
        acc[it] += g;
        for d in (0..rank).rev() {
            coords[d] += 1;
            it += st[d];
            if coords[d] < grad_shape[d] {
                break;
            }
            coords[d] = 0;
            it -= st[d] * grad_shape[d];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_new_checks_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn broadcast_shapes_align_right() {
        assert_eq!(broadcast_shape(&[3], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(
            broadcast_shape(&[16, 1, 1], &[2, 16, 4, 4]).unwrap(),
            vec![2, 16, 4, 4]
        );
        assert!(broadcast_shape(&[2], &[3]).is_err());
    }

    #[test]
    fn zip_broadcast_bias_pattern() {
        // (2,2,1,1) bias over (1,2,2,2) activations, the conv-bias case.
        let bias = [10.0, 20.0];
        let x: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let out = zip_broadcast(&x, &[1, 2, 2, 2], &bias, &[2, 1, 1], &[1, 2, 2, 2], |a, b| {
            a + b
        });
        assert_eq!(out, vec![10.0, 11.0, 12.0, 13.0, 24.0, 25.0, 26.0, 27.0]);
    }

    #[test]
    fn reduce_grad_reverses_broadcast() {
        let grad = vec![1.0; 8];
        let mut acc = vec![0.0; 2];
        reduce_grad_into(&grad, &[1, 2, 2, 2], &[2, 1, 1], &mut acc);
        assert_eq!(acc, vec![4.0, 4.0]);
    }
}
