//! Row-major dense matrices over `f32`/`f64` with GEMM-backed products.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` over strided operands.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: operand extents were checked against the slice lengths above.
                unsafe {
                    $f(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "shape mismatch");
        Self { rows, cols, data }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|x| *x = T::zero());
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sq_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum()
    }

    /// Columns `[c0, c0 + width)` copied into a new matrix.
    pub fn cols_slice(&self, c0: usize, width: usize) -> Self {
        let mut out = Self::zeros(self.rows, width);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[c0..c0 + width]);
        }
        out
    }

    /// Writes `src` into columns starting at `c0`, accumulating when `acc`.
    pub fn set_cols(&mut self, c0: usize, src: &Self, acc: bool) {
        for r in 0..self.rows {
            let dst = &mut self.data[r * self.cols + c0..r * self.cols + c0 + src.cols];
            if acc {
                for (d, &s) in dst.iter_mut().zip(src.row(r)) {
                    *d += s;
                }
            } else {
                dst.copy_from_slice(src.row(r));
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::from_f64(x.to_f64().unwrap()).unwrap()).collect(),
        }
    }
}

fn strides<T>(m: &Mat<T>, trans: bool) -> (usize, usize, isize, isize) {
    if trans {
        (m.cols, m.rows, 1, m.cols as isize)
    } else {
        (m.rows, m.cols, m.cols as isize, 1)
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`.
pub fn gemm_into<T: Scalar>(c: &mut Mat<T>, a: &Mat<T>, ta: bool, b: &Mat<T>, tb: bool, alpha: T, beta: T) {
    let (m, k, rsa, csa) = strides(a, ta);
    let (k2, n, rsb, csb) = strides(b, tb);
    assert_eq!(k, k2, "inner dimension mismatch");
    assert_eq!((c.rows, c.cols), (m, n), "output shape mismatch");
    if k == 0 {
        if beta == T::zero() {
            c.fill_zero();
        } else {
            c.scale(beta);
        }
        return;
    }
    T::gemm(m, k, n, alpha, &a.data, rsa, csa, &b.data, rsb, csb, beta, &mut c.data, n as isize, 1);
}

pub fn matmul<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.cols);
    gemm_into(&mut c, a, false, b, false, T::one(), T::zero());
    c
}

/// `a * b^T`.
pub fn matmul_nt<T: Scalar>(a: &Mat<T>, b: &Mat<T>) -> Mat<T> {
    let mut c = Mat::zeros(a.rows, b.rows);
    gemm_into(&mut c, a, false, b, true, T::one(), T::zero());
    c
}

/// `c += a^T * b`.
pub fn acc_tn<T: Scalar>(c: &mut Mat<T>, a: &Mat<T>, b: &Mat<T>) {
    gemm_into(c, a, true, b, false, T::one(), T::one());
}

/// Row-wise softmax, in place. Entries equal to `-inf` stay at zero.
pub fn softmax_rows<T: Scalar>(m: &mut Mat<T>) {
    let cols = m.cols;
    for row in m.data.chunks_mut(cols) {
        softmax_in_place(row);
    }
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    row.iter().map(|&x| x - lse).collect()
}

/// Backward of a row softmax given its output `p` and upstream `dp`.
pub fn softmax_backward_row<T: Scalar>(p: &[T], dp: &[T], dz: &mut [T]) {
    let dot: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    for ((z, &pi), &gi) in dz.iter_mut().zip(p).zip(dp) {
        *z = pi * (gi - dot);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn products_match_naive() {
        let a = Mat::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(matmul(&a, &b).data, vec![58.0, 64.0, 139.0, 154.0]);
        let bt = Mat::from_vec(2, 3, vec![7.0, 9.0, 11.0, 8.0, 10.0, 12.0]);
        assert_eq!(matmul_nt(&a, &bt).data, vec![58.0, 64.0, 139.0, 154.0]);
        let mut c = Mat::zeros(3, 3);
        acc_tn(&mut c, &a, &a);
        assert_eq!(c.at(0, 0), 17.0);
        assert_eq!(c.at(2, 1), 3.0 * 2.0 + 6.0 * 5.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut m = Mat::from_vec(2, 3, vec![1.0f32, 2.0, 3.0, f32::NEG_INFINITY, 0.0, 0.0]);
        softmax_rows(&mut m);
        assert!((m.row(0).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(m.at(1, 0), 0.0);
        assert!((m.at(1, 1) - 0.5).abs() < 1e-7);
    }
}
