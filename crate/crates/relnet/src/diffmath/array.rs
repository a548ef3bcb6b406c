//! Dense row-major arrays over `f32`/`f64`.
//!
//! Training runs in 32-bit for speed; gradient-check tests instantiate the
//! same code in 64-bit. The [`Scalar`] trait is the switch between the two.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use rand::Rng;

/// Element type for all numeric work in this crate.
///
/// Implemented for `f32` and `f64` only. Keeps the generic bounds in one
/// place and routes matrix multiplication to the matching gemm kernel.
pub trait Scalar:
    Float + fmt::Debug + fmt::Display + Default + Send + Sync + Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// c = alpha * a @ b + beta * c, row-major, dimensions m x k x n.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]);

    /// One draw from the standard normal distribution.
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// One draw uniform in [lo, hi).
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        // Box-Muller keeps us off distribution crates whose internals may
        // change between releases; determinism here is part of the contract.
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f32, hi: f32) -> Self {
        rng.random_range(lo..hi)
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                k as isize,
                1,
                b.as_ptr(),
                n as isize,
                1,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> Self {
        rng.random_range(lo..hi)
    }
}

/// Dense array with row-major storage.
///
/// Invariant: `shape.iter().product() == data.len()`. Rank is 1 or 2 in
/// practice; rank-1 arrays behave as row vectors where a matrix is expected.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Array { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Array {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn scalar(v: T) -> Self {
        Array {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Self {
        Self::from_vec(vec![rows, cols], data)
    }

    /// Entries drawn uniform in [-scale, scale).
    pub fn uniform<R: Rng + ?Sized>(shape: Vec<usize>, scale: T, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::uniform(rng, -scale, scale)).collect();
        Array { shape, data }
    }

    /// Entries drawn from the standard normal.
    pub fn randn<R: Rng + ?Sized>(shape: Vec<usize>, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::standard_normal(rng)).collect();
        Array { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// The single value of a scalar (or length-1) array.
    pub fn item(&self) -> T {
        assert!(
            self.is_scalar(),
            "item() on non-scalar array of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    /// Rows of a rank-2 array; a rank-1 array counts as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} array", self.shape.len()),
        }
    }

    /// Columns of a rank-2 array; a rank-1 array's column count is its length.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} array", self.shape.len()),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of all entries.
    pub fn l2_norm(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, &v| acc + v * v)
            .sqrt()
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Array<T> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Standard matrix product. Panics on inner-extent mismatch.
    pub fn matmul(&self, other: &Array<T>) -> Array<T> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        assert_eq!(
            k, k2,
            "matmul inner extents disagree: {:?} x {:?}",
            self.shape, other.shape
        );
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.data, &other.data, &mut out);
        Array {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Cast every entry through f64. Used to lift f32 models into the
    /// 64-bit gradient-check mode.
    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = Array::<f64>::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let v = Array::<f64>::matrix(2, 1, vec![3.0, 4.0]);
        let out = eye.matmul(&v);
        assert_eq!(out.data(), &[3.0, 4.0]);
        assert_eq!(out.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Array::<f64>::matrix(1, 2, vec![1.0, 2.0]);
        let b = Array::<f64>::matrix(2, 1, vec![3.0, 4.0]);
        assert_eq!(a.matmul(&b).data(), &[11.0]);
    }

    #[test]
    #[should_panic(expected = "inner extents disagree")]
    fn matmul_shape_mismatch_panics() {
        let a = Array::<f64>::matrix(1, 3, vec![1.0, 2.0, 3.0]);
        let b = Array::<f64>::matrix(2, 1, vec![3.0, 4.0]);
        let _ = a.matmul(&b);
    }

    #[test]
    fn shape_data_invariant() {
        let a = Array::<f32>::zeros(vec![3, 4]);
        assert_eq!(a.len(), 12);
        assert_eq!(a.rows(), 3);
        assert_eq!(a.cols(), 4);
        assert!(a.all_finite());
    }
}
