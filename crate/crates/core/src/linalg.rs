//! Thin safe wrapper over `matrixmultiply::dgemm` for row-major operands.

/// How an operand is laid out in memory relative to the product.
#[derive(Clone, Copy)]
pub(crate) enum Op {
    /// Row-major `rows x cols` as stored.
    N,
    /// The stored row-major matrix, transposed.
    T,
}

/// `c = alpha * op(a) * op(b) + beta * c` with `c` row-major `m x n`.
///
/// `a` is stored as row-major `m x k` (`Op::N`) or `k x m` (`Op::T`), `b` as
/// `k x n` or `n x k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: &[f64], op_a: Op, b: &[f64], op_b: Op, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the length assertion above bounds every index the strides reach.
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
            n as isize,
            1,
        );
    }
}
