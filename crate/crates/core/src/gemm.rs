//! Thin safe wrapper over `matrixmultiply::dgemm`.
//!
//! The kernel runs single-threaded with a fixed blocking order, so results
//! are bit-reproducible for identical inputs.

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), all row-major.
///
/// `op(a)` is `m × k`: stored `m × k`, or `k × m` when `a_trans`.
/// `op(b)` is `k × n`: stored `k × n`, or `n × k` when `b_trans`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ex(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer length");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer length");
    assert_eq!(c.len(), m * n, "gemm: output buffer length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: buffer lengths are checked above and the strides describe
    // exactly those buffers; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    gemm_ex(m, k, n, a, false, b, b_trans, c, accumulate);
}
