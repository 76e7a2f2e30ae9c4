//! Dense tensors and a tape-based reverse-mode differentiation engine.
//!
//! Values are generic over [`Real`] so the same network can run in f32 for
//! training and in f64 for finite-difference gradient checks.

mod gradcheck;
mod graph;
mod init;
pub mod kernels;
mod optim;

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::{Error, Result};

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use init::xavier_init;
pub use kernels::ConvGeom;
pub use optim::{Adam, ParamSet, Parameter};

/// Floating-point element type of the engine.
pub trait Real:
    Float + FromPrimitive + NumAssign + Default + Debug + Display + Send + Sync + 'static
{
    /// Clamp used by the BCE loss.
    const BCE_EPS: f64 = 1e-7;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = a * b + beta * c` on raw strided matrices.
    ///
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: every strided index touched
    /// must be in bounds of the respective buffer.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix product `C (m x n) = op(A) * op(B)` (+ `C` when
/// `accumulate`). `op(A)` is `m x k`: with `ta` the buffer holds `k x m`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: the length assertion above covers every index the strides reach.
    unsafe {
        T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1)
    }
}

/// N-dimensional row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || shape.contains(&0) || n != data.len() {
            return Err(Error::shape(format!("shape {shape:?} does not fit {} values", data.len())));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        assert!(!shape.is_empty() && !shape.contains(&0), "extents must be positive: {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().enumerate().for_each(|(i, v)| *v = f(i));
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(N, C, H, W)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::shape(format!("expected rank 4, got {:?}", self.shape))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference to `other` (shapes must agree).
    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod basics {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // A = [[1,2],[3,4]], B = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [34.0, 46.0, 78.0, 106.0]);
    }

    #[test]
    fn tensor_shape_checks() {
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(&[0], vec![]).is_err());
        let t = Tensor::<f32>::zeros(&[2, 3]);
        assert!(t.dims4().is_err());
        assert_eq!(t.reshape(&[1, 6, 1, 1]).unwrap().dims4().unwrap(), (1, 6, 1, 1));
    }
}
