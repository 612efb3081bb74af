//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during the forward pass and
//! replays their adjoints in reverse to accumulate gradients exactly once
//! per use of each input. Tensors are flat row-major buffers; the scalar
//! type is generic (f32 for training, f64 for gradient checking).

mod gradcheck;
mod tape;
#[cfg(test)]
mod tests_tape;

pub use gradcheck::{finite_diff_check, finite_diff_check_tampered, primitive_checks, CheckEntry};
pub use tape::{CeRow, Tape, TensorId};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array. `data` is row-major; scalars have rank 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    pub requires_grad: bool,
    /// Populated for parameters after a backward pass; same length as `data`.
    pub grad: Option<Vec<F>>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: F) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: F) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Convert element-wise to another scalar type (drops any gradient).
    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::real(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Row-major matrix multiply, a: (m,k) × b: (k,n) → (m,n).
pub(crate) fn matmul_raw<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// a: (m,n) × bᵀ where b: (k,n) → (m,k).
pub(crate) fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, n: usize, k: usize) -> Vec<F> {
    let mut out = vec![F::zero(); m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = F::zero();
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            out[i * k + p] = s;
        }
    }
    out
}

/// aᵀ × b where a: (m,k), b: (m,n) → (k,n).
pub(crate) fn matmul_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}
