//! Dense kernels on top of a packed GEMM. Every output element is reduced
//! in the same order whatever the number of rows, so results for one item
//! do not depend on what else is in the batch.

use super::tensor::Tensor;
use crate::scalar::Real;

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn gemm<T: Real>(m: usize, k: usize, n: usize, a: (&[T], isize, isize), b: (&[T], isize, isize)) -> Tensor<T> {
    let mut out = Tensor::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return out;
    }
    // SAFETY: callers pass strides that stay inside `a` and `b`; `out` is a
    // fresh row-major m x n buffer.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    out
}

/// `a [n x k] * b [k x m]`.
pub(crate) fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols(), b.rows());
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    gemm(n, k, m, (a.data(), k as isize, 1), (b.data(), m as isize, 1))
}

/// `aᵀ b` for `a` stored as `k x n` and `b` as `k x m`.
pub(crate) fn matmul_tn<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.rows(), b.rows());
    let (k, n, m) = (a.rows(), a.cols(), b.cols());
    gemm(n, k, m, (a.data(), 1, n as isize), (b.data(), m as isize, 1))
}

/// `a bᵀ` for `a` stored as `n x k` and `b` as `m x k`.
pub(crate) fn matmul_nt<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    assert_eq!(a.cols(), b.cols());
    let (n, k, m) = (a.rows(), a.cols(), b.rows());
    gemm(n, k, m, (a.data(), k as isize, 1), (b.data(), 1, k as isize))
}
