//! Thin wrappers over `matrixmultiply::dgemm` with explicit strides.

/// Strided row-major view used by the attention kernels.
#[derive(Clone, Copy)]
pub(crate) struct View {
    pub rs: isize,
    pub cs: isize,
}

impl View {
    pub fn rowmajor(cols: usize) -> Self {
        View {
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn transposed(self) -> Self {
        View {
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `c (m x n) = a (m x k) . b (k x n)`, or `c += ...` when `accumulate` is set.
/// All operands are contiguous row-major.
pub fn matmul_into(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    gemm_strided(
        m,
        k,
        n,
        1.0,
        a,
        View::rowmajor(k),
        b,
        View::rowmajor(n),
        if accumulate { 1.0 } else { 0.0 },
        c,
        View::rowmajor(n),
    );
}

/// General strided product. Callers guarantee every addressed element lies
/// inside the given slices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let idx = (i as isize * cv.rs + j as isize * cv.cs) as usize;
                c[idx] *= beta;
            }
        }
        return;
    }
    let last = |v: View, r: usize, cc: usize| (r as isize - 1) * v.rs + (cc as isize - 1) * v.cs;
    assert!(last(av, m, k) < a.len() as isize);
    assert!(last(bv, k, n) < b.len() as isize);
    assert!(last(cv, m, n) < c.len() as isize);
    // SAFETY: bounds of the last addressed element are asserted above and all
    // strides are non-negative.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            cv.rs,
            cv.cs,
        );
    }
}
