//! Thin safe wrappers over the dgemm kernel; every dense matrix here is
//! row-major f64.

/// C = A . B for row-major A (m x k), B (k x n), C (m x n). Overwrites C.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm_ex(m, k, n, 1.0, a, k as isize, 1, b, n as isize, 1, 0.0, c, n as isize, 1);
}

/// General strided C = alpha * A . B + beta * C. Strides are in elements and
/// must be nonnegative; buffers are bounds-checked against the strided extents.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_ex(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize
    };
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0 && rsc >= 0 && csc >= 0);
    if k > 0 {
        assert!(extent(m, k, rsa, csa) < a.len(), "A extent exceeds buffer");
        assert!(extent(k, n, rsb, csb) < b.len(), "B extent exceeds buffer");
    }
    assert!(extent(m, n, rsc, csc) < c.len(), "C extent exceeds buffer");
    unsafe {
        matrixmultiply::dgemm(
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
            rsc,
            csc,
        );
    }
}
