// Thin safe wrappers over `matrixmultiply::dgemm` for row-major buffers.
// Each computes `c = op(a) * op(b) + beta * c`.

fn scale_only(c: &mut [f64], beta: f64) {
    if beta == 0.0 {
        c.iter_mut().for_each(|v| *v = 0.0);
    } else if beta != 1.0 {
        c.iter_mut().for_each(|v| *v *= beta);
    }
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        scale_only(&mut c[..m * n], beta);
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n);
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the borrowed slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a: m×k`, `b: k×n`.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    dgemm(m, k, n, a, k as isize, 1, b, n as isize, 1, c, beta);
}

/// `a: m×k`, `b: n×k` (used transposed).
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    dgemm(m, k, n, a, k as isize, 1, b, 1, k as isize, c, beta);
}

/// `a: k×m` (used transposed), `b: k×n`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    dgemm(m, k, n, a, 1, m as isize, b, n as isize, 1, c, beta);
}
