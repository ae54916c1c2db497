use super::Real;

/// Dense product `C (m×n) = op(A) · op(B)` (optionally accumulated into `C`).
///
/// `A` is stored row-major as `m×k`, or as `k×m` when `trans_a` is set;
/// likewise `B` is `k×n` or `n×k`. `C` is row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    trans_a: bool,
    b: &[F],
    trans_b: bool,
    c: &mut [F],
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    strided_gemm(
        m,
        k,
        n,
        F::ONE,
        a,
        rsa,
        csa,
        b,
        rsb,
        csb,
        if accumulate { F::ONE } else { F::ZERO },
        c,
        n,
        1,
    );
}

fn extent(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// Strided product on sub-views of larger buffers. Slices start at the
/// first element of each view; bounds are checked against the strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn strided_gemm<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: &[F],
    rsa: usize,
    csa: usize,
    b: &[F],
    rsb: usize,
    csb: usize,
    beta: F,
    c: &mut [F],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= extent(m, k, rsa, csa), "gemm: A view out of bounds");
    assert!(b.len() >= extent(k, n, rsb, csb), "gemm: B view out of bounds");
    assert!(c.len() >= extent(m, n, rsc, csc), "gemm: C view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[i * rsc + j * csc];
                *x = if beta == F::ZERO { F::ZERO } else { *x * beta };
            }
        }
        return;
    }
    // SAFETY: extents checked above; matrixmultiply reads/writes only within them.
    unsafe {
        F::raw_gemm(
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
