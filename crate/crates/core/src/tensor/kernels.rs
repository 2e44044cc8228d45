//! Fixed-order dense kernels.
//!
//! Every kernel accumulates each output element in one fixed index order, so
//! results are bit-identical run to run on a given build. The inner loops are
//! written in saxpy form (constant scalar times a contiguous row) which the
//! compiler auto-vectorizes without reassociating the per-element sums.

use crate::scalar::Scalar;

/// out(m×n) += a(m×k) · b(k×n)
pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out(k×n) += aᵀ · b, with a(m×k), b(m×n)
pub(crate) fn matmul_at_b_acc<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + av * bv;
            }
        }
    }
}

/// out(cols×rows) = xᵀ, with x(rows×cols)
pub(crate) fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize, out: &mut [T]) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
}
