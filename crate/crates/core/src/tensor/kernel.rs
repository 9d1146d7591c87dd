/// `c = alpha * op(a) * op(b) + beta * c` over strided row-major views.
///
/// `a` is `m x k` addressed as `a[i * rsa + p * csa]`, likewise for `b`
/// (`k x n`) and `c` (`m x n`, always contiguous row-major). Transposes are
/// expressed by swapping strides.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: lhs view out of bounds");
        assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: rhs view out of bounds");
    }
    assert!(c.len() >= m * n, "gemm: output too small");
    // SAFETY: every index touched by dgemm is bounded by the asserts above;
    // strides fit in isize for any slice that exists in memory.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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
