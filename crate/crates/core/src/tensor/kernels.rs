//! Plain matrix-product kernels over row-major slices.
//!
//! All three accumulate into `c`; callers zero it when they want assignment.

use crate::scalar::Scalar;

/// `c[p×r] += a[p×q] · b[q×r]`
pub fn gemm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), q * r);
    debug_assert_eq!(c.len(), p * r);
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let c_row = &mut c[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let b_row = &b[k * r..(k + 1) * r];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[p×n] += a[p×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), p * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), p * n);
    for i in 0..p {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[q×r] += a[p×q]ᵀ · b[p×r]`
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    debug_assert_eq!(a.len(), p * q);
    debug_assert_eq!(b.len(), p * r);
    debug_assert_eq!(c.len(), q * r);
    for i in 0..p {
        let a_row = &a[i * q..(i + 1) * q];
        let b_row = &b[i * r..(i + 1) * r];
        for (k, &aik) in a_row.iter().enumerate() {
            if aik == T::zero() {
                continue;
            }
            let c_row = &mut c[k * r..(k + 1) * r];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}
