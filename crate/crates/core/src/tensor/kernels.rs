//! Raw matrix kernels shared by forward ops and backward rules.
//!
//! All three products accumulate into `out` (`out += ...`); callers zero
//! the buffer first when they need a plain product. Loop order is chosen so
//! the inner loop walks contiguous rows, which the compiler vectorizes.

use crate::scalar::Scalar;

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn mm_nn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]^T` (rows of `b` are dotted with rows of `a`)
pub fn mm_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * b[m,n]`
pub fn mm_tn<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + av * bv;
            }
        }
    }
}

/// Stable softmax of one row in place: subtract the max, exponentiate,
/// normalize.
pub fn softmax_row_inplace<F: Scalar>(row: &mut [F]) {
    let mut max = F::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

/// Log-sum-exp of a row, computed with max subtraction.
pub fn log_sum_exp<F: Scalar>(row: &[F]) -> F {
    let mut max = F::neg_infinity();
    for &x in row.iter() {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for &x in row.iter() {
        sum = sum + (x - max).exp();
    }
    max + sum.ln()
}
