//! Dense linear algebra and the two differentiation routes.
//!
//! The hot training path uses hand-derived batched gradients (see
//! [`crate::mlp`] and [`crate::losses`]). [`tape`] provides an independent
//! reverse-mode engine over small vector graphs, and [`finite_diff_grad`] the
//! numerical oracle both are checked against.

pub mod tape;

use crate::error::{Error, Result};
use crate::real::{Real, Trans};

pub use tape::{value_and_grad, Graph, NodeId};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims("Matrix::from_vec", rows * cols, data.len()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::dims("Matrix::from_rows", cols, r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix<T>) -> Result<Matrix<T>> {
        if self.cols != other.rows {
            return Err(Error::dims("Matrix::matmul", self.cols, other.rows));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            Trans::No,
            Trans::No,
            self.rows,
            other.cols,
            self.cols,
            T::one(),
            &self.data,
            &other.data,
            T::zero(),
            &mut out.data,
        );
        Ok(out)
    }

    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.cols {
            return Err(Error::dims("Matrix::matvec", self.cols, x.len()));
        }
        Ok(matvec(&self.data, self.rows, self.cols, x))
    }

    pub fn frobenius_norm(&self) -> T {
        norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Safe row-major GEMM: `C = alpha * op(A) * op(B) + beta * C`.
///
/// `op(A)` is `m×k` (stored `m×k` for [`Trans::No`], `k×m` for [`Trans::Yes`]);
/// `op(B)` is `k×n`; `C` is `m×n`. When `beta` is zero `C` is overwritten
/// without being read.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    ta: Trans,
    tb: Trans,
    m: usize,
    n: usize,
    k: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong length");
    assert_eq!(b.len(), k * n, "gemm: B has wrong length");
    assert_eq!(c.len(), m * n, "gemm: C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: lengths are asserted above, strides describe the stated layouts
    // and `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `W x` for a row-major `rows×cols` weight buffer.
pub fn matvec<T: Real>(w: &[T], rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    debug_assert_eq!(w.len(), rows * cols);
    w.chunks_exact(cols.max(1)).take(rows).map(|row| dot(row, x)).collect()
}

/// `Wᵀ y` for a row-major `rows×cols` weight buffer.
pub fn matvec_t<T: Real>(w: &[T], rows: usize, cols: usize, y: &[T]) -> Vec<T> {
    debug_assert_eq!(w.len(), rows * cols);
    let mut out = vec![T::zero(); cols];
    for (r, &yr) in y.iter().enumerate().take(rows) {
        if yr == T::zero() {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += wv * yr;
        }
    }
    out
}

pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| {
        let d = x - y;
        acc + d * d
    })
}

/// `W x + b`.
pub fn affine<T: Real>(w: &Matrix<T>, x: &[T], b: &[T]) -> Result<Vec<T>> {
    if b.len() != w.rows() {
        return Err(Error::dims("affine bias", w.rows(), b.len()));
    }
    let mut out = w.matvec(x)?;
    for (o, &bi) in out.iter_mut().zip(b) {
        *o += bi;
    }
    Ok(out)
}

pub fn relu<T: Real>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
}

/// 1 where `x > 0` (strict), else 0. Doubles as the ReLU derivative, which
/// is taken to be 0 at the kink.
pub fn relu_mask<T: Real>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v > T::zero() { T::one() } else { T::zero() })
        .collect()
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place<T: Real>(z: &mut [T]) {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// A loss value with its gradient over a flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRecord<T> {
    pub value: T,
    pub grads: Vec<T>,
}

impl<T: Real> GradRecord<T> {
    pub fn new(value: T, grads: Vec<T>) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::NonFinite("loss value"));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        Ok(GradRecord { value, grads })
    }
}

/// Central finite-difference gradient of `loss` at `params`.
pub fn finite_diff_grad<T, F>(mut loss: F, params: &[T], step: T) -> Vec<T>
where
    T: Real,
    F: FnMut(&[T]) -> T,
{
    assert!(step > T::zero(), "finite-difference step must be positive");
    let mut probe = params.to_vec();
    let two = T::of(2.0);
    (0..params.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = loss(&probe);
            probe[i] = orig - step;
            let down = loss(&probe);
            probe[i] = orig;
            (up - down) / (two * step)
        })
        .collect()
}
