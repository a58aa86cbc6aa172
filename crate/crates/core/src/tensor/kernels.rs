//! Slice-level dense kernels. All matrices are row-major.

use crate::scalar::Scalar;

/// `a[p×q] · b[q×r]`, accumulating over `q` in ascending order.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * r];
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        let arow = &a[i * q..(i + 1) * q];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * r..(k + 1) * r];
            for (o, &bkj) in orow.iter_mut().zip(brow) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `a[p×q] · b[r×q]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); p * r];
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        for j in 0..r {
            let brow = &b[j * q..(j + 1) * q];
            out[i * r + j] = dot(arow, brow);
        }
    }
    out
}

/// `a[p×q]ᵀ · b[p×r]`, giving `q×r`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); q * r];
    for i in 0..p {
        let arow = &a[i * q..(i + 1) * q];
        let brow = &b[i * r..(i + 1) * r];
        for (k, &aik) in arow.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let orow = &mut out[k * r..(k + 1) * r];
            for (o, &bij) in orow.iter_mut().zip(brow) {
                *o += aik * bij;
            }
        }
    }
    out
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// In-place row softmax with row-max subtraction.
pub fn softmax_rows_inplace<T: Scalar>(x: &mut [T], cols: usize) {
    for row in x.chunks_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}
