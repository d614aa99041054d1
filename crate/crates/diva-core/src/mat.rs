//! Row-major dense matrix plus the handful of BLAS-shaped helpers the
//! backbone and encoders need. Heavy products dispatch to matrixmultiply.

use crate::real::Real;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    /// Gaussian init with the given std.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| T::of(rng.normal() * std)).collect();
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }
    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }
    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }
    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn transposed(&self) -> Mat<T> {
        Mat::from_fn(self.cols, self.rows, |r, c| self.at(c, r))
    }

    /// self := self + alpha * other (elementwise).
    pub fn add_scaled(&mut self, other: &Mat<T>, alpha: T) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += alpha * *b;
        }
    }

    /// c = a @ b
    pub fn matmul(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
        assert_eq!(a.cols, b.rows, "matmul inner dims");
        let mut c = Mat::zeros(a.rows, b.cols);
        unsafe {
            T::gemm(
                a.rows,
                a.cols,
                b.cols,
                T::one(),
                a.data.as_ptr(),
                a.cols as isize,
                1,
                b.data.as_ptr(),
                b.cols as isize,
                1,
                T::zero(),
                c.data.as_mut_ptr(),
                c.cols as isize,
                1,
            );
        }
        c
    }

    /// c += a @ b
    pub fn matmul_acc(c: &mut Mat<T>, a: &Mat<T>, b: &Mat<T>) {
        assert_eq!(a.cols, b.rows);
        assert_eq!(c.rows, a.rows);
        assert_eq!(c.cols, b.cols);
        unsafe {
            T::gemm(
                a.rows,
                a.cols,
                b.cols,
                T::one(),
                a.data.as_ptr(),
                a.cols as isize,
                1,
                b.data.as_ptr(),
                b.cols as isize,
                1,
                T::one(),
                c.data.as_mut_ptr(),
                c.cols as isize,
                1,
            );
        }
    }

    /// c = a^T @ b  (a: k x m, b: k x n -> c: m x n)
    pub fn matmul_tn(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
        assert_eq!(a.rows, b.rows, "matmul_tn inner dims");
        let mut c = Mat::zeros(a.cols, b.cols);
        unsafe {
            T::gemm(
                a.cols,
                a.rows,
                b.cols,
                T::one(),
                a.data.as_ptr(),
                1,
                a.cols as isize,
                b.data.as_ptr(),
                b.cols as isize,
                1,
                T::zero(),
                c.data.as_mut_ptr(),
                c.cols as isize,
                1,
            );
        }
        c
    }

    /// c += a^T @ b
    pub fn matmul_tn_acc(c: &mut Mat<T>, a: &Mat<T>, b: &Mat<T>) {
        assert_eq!(a.rows, b.rows);
        assert_eq!(c.rows, a.cols);
        assert_eq!(c.cols, b.cols);
        unsafe {
            T::gemm(
                a.cols,
                a.rows,
                b.cols,
                T::one(),
                a.data.as_ptr(),
                1,
                a.cols as isize,
                b.data.as_ptr(),
                b.cols as isize,
                1,
                T::one(),
                c.data.as_mut_ptr(),
                c.cols as isize,
                1,
            );
        }
    }

    /// c = a @ b^T  (a: m x k, b: n x k -> c: m x n)
    pub fn matmul_nt(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
        assert_eq!(a.cols, b.cols, "matmul_nt inner dims");
        let mut c = Mat::zeros(a.rows, b.rows);
        unsafe {
            T::gemm(
                a.rows,
                a.cols,
                b.rows,
                T::one(),
                a.data.as_ptr(),
                a.cols as isize,
                1,
                b.data.as_ptr(),
                1,
                b.cols as isize,
                T::zero(),
                c.data.as_mut_ptr(),
                c.cols as isize,
                1,
            );
        }
        c
    }
}

// Slice-level helpers used throughout the math code.

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut s = T::zero();
    for i in 0..a.len() {
        s = a[i].mul_add(b[i], s);
    }
    s
}

#[inline]
pub fn axpy<T: Real>(y: &mut [T], alpha: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.len() {
        y[i] = alpha.mul_add(x[i], y[i]);
    }
}

#[inline]
pub fn norm2<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// y = W @ x + b, W row-major (out x in).
pub fn affine<T: Real>(w: &Mat<T>, b: &[T], x: &[T], y: &mut [T]) {
    debug_assert_eq!(w.cols(), x.len());
    debug_assert_eq!(w.rows(), y.len());
    debug_assert_eq!(b.len(), y.len());
    for o in 0..w.rows() {
        y[o] = dot(w.row(o), x) + b[o];
    }
}

/// Accumulates dW += dy (outer) x, db += dy, dx += W^T dy.
pub fn affine_backward<T: Real>(
    w: &Mat<T>,
    x: &[T],
    dy: &[T],
    dw: Option<&mut Mat<T>>,
    db: Option<&mut [T]>,
    dx: Option<&mut [T]>,
) {
    if let Some(dw) = dw {
        for o in 0..w.rows() {
            axpy(dw.row_mut(o), dy[o], x);
        }
    }
    if let Some(db) = db {
        axpy(db, T::one(), dy);
    }
    if let Some(dx) = dx {
        for o in 0..w.rows() {
            axpy(dx, dy[o], w.row(o));
        }
    }
}
