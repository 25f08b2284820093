use super::Scalar;

/// Storage order of a matrix operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Layout {
    /// Stored as given, row-major.
    Normal,
    /// Stored row-major as the transpose of the logical operand.
    Transposed,
}

impl Layout {
    fn strides(self, rows: usize, cols: usize) -> (isize, isize) {
        match self {
            Layout::Normal => (cols as isize, 1),
            Layout::Transposed => (1, rows as isize),
        }
    }
}

/// Right-hand operands up to this many entries skip the packed kernel.
///
/// The choice depends only on `k` and `n`, so a row of the output is computed
/// the same way whatever the number of rows.
const SMALL_RHS: usize = 1024;

#[allow(clippy::too_many_arguments)]
fn small_gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    let c = &mut c[..m * n];
    if !accumulate {
        c.fill(T::zero());
    }
    let b: std::borrow::Cow<[T]> = match b_layout {
        Layout::Normal => b[..k * n].into(),
        Layout::Transposed => {
            let mut t = vec![T::zero(); k * n];
            for (j, col) in b[..k * n].chunks_exact(k).enumerate() {
                for (p, &v) in col.iter().enumerate() {
                    t[p * n + j] = v;
                }
            }
            t.into()
        }
    };
    let (rsa, csa) = a_layout.strides(m, k);
    let (rsa, csa) = (rsa as usize, csa as usize);
    for (i, crow) in c.chunks_exact_mut(n).enumerate() {
        for (p, brow) in b.chunks_exact(n).enumerate() {
            let av = a[i * rsa + p * csa];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c (m×n) = a (m×k) · b (k×n)`, overwriting `c` or adding into it.
///
/// Panics when a slice is too short for the requested extents.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_layout: Layout,
    b: &[T],
    b_layout: Layout,
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs holds {} values, needs {}", a.len(), m * k);
    assert!(b.len() >= k * n, "gemm: rhs holds {} values, needs {}", b.len(), k * n);
    assert!(c.len() >= m * n, "gemm: output holds {} values, needs {}", c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    if k * n <= SMALL_RHS {
        small_gemm(m, k, n, a, a_layout, b, b_layout, c, accumulate);
        return;
    }
    let (rsa, csa) = a_layout.strides(m, k);
    let (rsb, csb) = b_layout.strides(k, n);
    // SAFETY: extents and strides address exactly the m·k, k·n and m·n prefixes
    // whose lengths were asserted above.
    unsafe {
        T::gemm_raw(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}
