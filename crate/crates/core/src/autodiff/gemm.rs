/// `C = alpha * A·B + beta * C` over strided row/column layouts.
///
/// Panics if any operand slice is too short for the given extents and strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm: A too short");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm: B too short");
    }
    assert!(c.len() > (m - 1) * rsc + (n - 1) * csc, "gemm: C too short");
    // SAFETY: all three operands were bounds-checked above for the
    // extents and strides handed to the kernel; `c` is uniquely borrowed.
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
            rsc as isize,
            csc as isize,
        );
    }
}
