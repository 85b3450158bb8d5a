//! Dense row-major tensors, a reverse-mode tape, named parameters and the
//! checkpoint container.
//!
//! Values live in [`Tensor`]. Anything that needs a gradient is recorded on a
//! [`Tape`] and addressed through a [`Var`] handle; parameters persist across
//! tapes in a [`ParamStore`] and are bound into each tape on first use.

mod checkpoint;
mod params;
mod tape;

pub use checkpoint::{Checkpoint, CheckpointEntry, CHECKPOINT_MAGIC};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{Grads, Tag, Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type. Implemented for `f32` (training) and `f64`
/// (gradient checks).
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;

    /// Raw strided GEMM: `c = alpha * a * b + beta * c`.
    ///
    /// # Safety
    /// Every strided access must stay inside the pointed-to allocations.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view of a matrix inside a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Layout {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl Layout {
    pub fn row_major(offset: usize, cols: usize) -> Self {
        Layout { offset, rs: cols, cs: 1 }
    }

    /// Row-major storage of a `cols`-wide matrix read as its transpose.
    pub fn transposed(offset: usize, cols: usize) -> Self {
        Layout { offset, rs: 1, cs: cols }
    }

    fn last(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            self.offset
        } else {
            self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
        }
    }
}

/// Safe strided GEMM: `c[m×n] = alpha * a[m×k] * b[k×n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    la: Layout,
    b: &[T],
    lb: Layout,
    beta: T,
    c: &mut [T],
    lc: Layout,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || la.last(m, k) < a.len(), "gemm: lhs view out of bounds");
    assert!(k == 0 || lb.last(k, n) < b.len(), "gemm: rhs view out of bounds");
    assert!(lc.last(m, n) < c.len(), "gemm: output view out of bounds");
    // SAFETY: the asserts above bound every strided access of each operand.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(la.offset),
            la.rs as isize,
            la.cs as isize,
            b.as_ptr().add(lb.offset),
            lb.rs as isize,
            lb.cs as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.rs as isize,
            lc.cs as isize,
        )
    }
}

/// Dense row-major array of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::contract(format!("zero-sized dimension in shape {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::of(x)).collect())
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the last axis.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape("zip_map", other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Frobenius norm, accumulated in double precision.
    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x.f64() * x.f64()).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.f64() * b.f64()).sum()
    }

    /// Frobenius distance `‖self − other‖`.
    pub fn dist(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = a.f64() - b.f64();
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.f64().abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.f64()).collect()
    }

    pub(crate) fn same_shape(&self, op: &'static str, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
        let t = Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], a^T a = [[10,14],[14,20]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let mut c = [0.0f64; 4];
        gemm(
            2,
            2,
            2,
            1.0,
            &a,
            Layout::transposed(0, 2),
            &a,
            Layout::row_major(0, 2),
            0.0,
            &mut c,
            Layout::row_major(0, 2),
        );
        assert_eq!(c, [10.0, 14.0, 14.0, 20.0]);
    }

    #[test]
    fn norms() {
        let t = Tensor::<f32>::from_f64(&[2], &[3.0, 4.0]).unwrap();
        assert_eq!(t.norm(), 5.0);
        assert_eq!(t.dist(&Tensor::zeros(&[2])), 5.0);
    }
}
